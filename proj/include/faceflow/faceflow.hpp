#pragma once

#include "faceflow/config.hpp"
#include "faceflow/engine.hpp"
#include "faceflow/error.hpp"
#include "faceflow/external_backend.hpp"
#include "faceflow/frame_store.hpp"
#include "faceflow/geometry.hpp"
#include "faceflow/inference.hpp"
#include "faceflow/keypoint_template.hpp"
#include "faceflow/metrics.hpp"
#include "faceflow/mock_backend.hpp"
#include "faceflow/rng.hpp"
#include "faceflow/scene.hpp"
#include "faceflow/simindex.hpp"
#include "faceflow/trace.hpp"
#include "faceflow/tracking.hpp"
