#include "deidforge/facegeom.hpp"

namespace deidforge::facegeom {

// Template version 1. Generated once from the toy generator's mid-range
// frontal face (neutral mouth), scaled by 29 px per face half-height and
// centered at (39.5, 38), then frozen. Regenerating it changes every aligned
// crop, so bump kTemplateVersion if these numbers ever change.
const LandmarkSet& canonical_template() {
  static const LandmarkSet tpl(std::vector<Point>{
      {16.3, 38},
      {16.7457814946, 43.6576193385},
      {18.0659948457, 49.0978195386},
      {20.2099049946, 54.1115367576},
      {23.0951226765, 58.5060966544},
      {26.6107705939, 62.1126187568},
      {30.6217443691, 64.7925064428},
      {34.9739045292, 66.4427731317},
      {39.5, 67},
      {44.0260954708, 66.4427731317},
      {48.3782556309, 64.7925064428},
      {52.3892294061, 62.1126187568},
      {55.9048773235, 58.5060966544},
      {58.7900950054, 54.1115367576},
      {60.9340051543, 49.0978195386},
      {62.2542185054, 43.6576193385},
      {62.7, 38},
      {23.724, 25.82},
      {26.624, 24.515},
      {29.524, 24.08},
      {32.424, 24.515},
      {35.324, 25.82},
      {43.676, 25.82},
      {46.576, 24.515},
      {49.476, 24.08},
      {52.376, 24.515},
      {55.276, 25.82},
      {39.5, 32.2},
      {39.5, 35.39},
      {39.5, 38.58},
      {39.5, 41.77},
      {36.716, 42.93},
      {38.108, 43.365},
      {39.5, 43.51},
      {40.892, 43.365},
      {42.284, 42.93},
      {26.044, 31.62},
      {28.364, 29.88},
      {30.684, 29.88},
      {33.004, 31.62},
      {30.684, 33.36},
      {28.364, 33.36},
      {45.996, 31.62},
      {48.316, 29.88},
      {50.636, 29.88},
      {52.956, 31.62},
      {50.636, 33.36},
      {48.316, 33.36},
      {31.148, 51.92},
      {34.4888, 50.8064},
      {37.412, 50.28875},
      {39.5, 50.18},
      {41.588, 50.28875},
      {44.5112, 50.8064},
      {47.852, 51.92},
      {44.5112, 53.5904},
      {42.0056, 54.2951},
      {39.5, 54.53},
      {36.9944, 54.2951},
      {34.4888, 53.5904},
      {32.8184, 51.92},
      {36.49328, 51.541376},
      {39.5, 51.485},
      {42.50672, 51.541376},
      {46.1816, 51.92},
      {42.50672, 52.424832},
      {39.5, 52.5},
      {36.49328, 52.424832},
  });
  return tpl;
}

}  // namespace deidforge::facegeom
