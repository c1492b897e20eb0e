#pragma once

// Umbrella header for the GraphMFT library.

#include "graphmft/data.hpp"
#include "graphmft/gradcheck.hpp"
#include "graphmft/graph.hpp"
#include "graphmft/layers.hpp"
#include "graphmft/metrics.hpp"
#include "graphmft/model.hpp"
#include "graphmft/tensor.hpp"
#include "graphmft/train.hpp"
#include "graphmft/util.hpp"
