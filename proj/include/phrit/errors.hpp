#pragma once

#include <stdexcept>
#include <string>

namespace phrit {

// Geometry
struct DegenerateFace : std::runtime_error { using std::runtime_error::runtime_error; };
struct EmptyMesh : std::runtime_error { using std::runtime_error::runtime_error; };

// Skeleton
struct DegenerateBone : std::runtime_error { using std::runtime_error::runtime_error; };
struct CollinearPalm : std::runtime_error { using std::runtime_error::runtime_error; };

// Autodiff / optimizer
struct NonScalarLoss : std::runtime_error { using std::runtime_error::runtime_error; };
struct UnsupportedActivation : std::runtime_error { using std::runtime_error::runtime_error; };
struct ShapeMismatch : std::runtime_error { using std::runtime_error::runtime_error; };

// Networks
struct DimMismatch : std::runtime_error { using std::runtime_error::runtime_error; };
struct BadPartIndex : std::runtime_error { using std::runtime_error::runtime_error; };

// Procedural hand
struct ProjectionDiverged : std::runtime_error { using std::runtime_error::runtime_error; };

// Marching cubes / pipeline
struct EmptySurface : std::runtime_error { using std::runtime_error::runtime_error; };
struct TopologyMismatch : std::runtime_error { using std::runtime_error::runtime_error; };
struct Diverged : std::runtime_error { using std::runtime_error::runtime_error; };
struct NonFiniteLoss : std::runtime_error { using std::runtime_error::runtime_error; };

// Metrics
struct EmptyCloud : std::runtime_error { using std::runtime_error::runtime_error; };

// File handling / config
struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DataError : std::runtime_error { using std::runtime_error::runtime_error; };

}  // namespace phrit
