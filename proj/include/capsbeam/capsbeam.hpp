#pragma once

#include "capsbeam/accel_sim.hpp"
#include "capsbeam/beamform.hpp"
#include "capsbeam/capsnet.hpp"
#include "capsbeam/config.hpp"
#include "capsbeam/error.hpp"
#include "capsbeam/fixed_point.hpp"
#include "capsbeam/geometry.hpp"
#include "capsbeam/io.hpp"
#include "capsbeam/metrics.hpp"
#include "capsbeam/parallel.hpp"
#include "capsbeam/phantom.hpp"
#include "capsbeam/pipeline_config.hpp"
#include "capsbeam/pruning.hpp"
#include "capsbeam/quantized.hpp"
#include "capsbeam/scene.hpp"
#include "capsbeam/tensor.hpp"
