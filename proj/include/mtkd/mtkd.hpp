#pragma once

// Umbrella header: the whole library.

#include "mtkd/core/autograd.hpp"
#include "mtkd/core/conv.hpp"
#include "mtkd/core/error.hpp"
#include "mtkd/core/log.hpp"
#include "mtkd/core/ops.hpp"
#include "mtkd/core/random.hpp"
#include "mtkd/core/tensor.hpp"
#include "mtkd/data/dataset.hpp"
#include "mtkd/data/image.hpp"
#include "mtkd/data/nifti.hpp"
#include "mtkd/data/png_io.hpp"
#include "mtkd/distill/checkpoint.hpp"
#include "mtkd/distill/trainer.hpp"
#include "mtkd/experiments/ablation.hpp"
#include "mtkd/experiments/config.hpp"
#include "mtkd/experiments/curves.hpp"
#include "mtkd/experiments/report.hpp"
#include "mtkd/losses/losses.hpp"
#include "mtkd/metrics/anova.hpp"
#include "mtkd/metrics/metrics.hpp"
#include "mtkd/models/config.hpp"
#include "mtkd/models/networks.hpp"
#include "mtkd/models/projector.hpp"
#include "mtkd/nn/module.hpp"
#include "mtkd/nn/optim.hpp"
