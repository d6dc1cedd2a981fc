#pragma once

// Convenience umbrella: pulls the whole pipeline in at once. Individual tools
// should prefer the specific headers they use.

#include "facet/core/error.hpp"
#include "facet/core/image_ops.hpp"
#include "facet/core/pose.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/sha256.hpp"
#include "facet/core/tensor.hpp"
#include "facet/eval/metrics.hpp"
#include "facet/infer/infer.hpp"
#include "facet/io/blob.hpp"
#include "facet/io/checkpoint.hpp"
#include "facet/io/dataset.hpp"
#include "facet/io/png_io.hpp"
#include "facet/map/mapping.hpp"
#include "facet/nn/adam.hpp"
#include "facet/nn/graph.hpp"
#include "facet/nn/layers.hpp"
#include "facet/nn/ops.hpp"
#include "facet/retarget/retarget.hpp"
#include "facet/stabilize/stabilizer.hpp"
#include "facet/stage/synthetic.hpp"
#include "facet/train/train.hpp"
#include "facet/vae/common.hpp"
#include "facet/vae/expression.hpp"
#include "facet/vae/geometry.hpp"
#include "facet/vae/texture.hpp"
