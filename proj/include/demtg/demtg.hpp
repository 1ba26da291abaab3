#pragma once

// Umbrella header.

#include "demtg/backbone.hpp"
#include "demtg/commands.hpp"
#include "demtg/common.hpp"
#include "demtg/config.hpp"
#include "demtg/data.hpp"
#include "demtg/decoder.hpp"
#include "demtg/deformable_mixer.hpp"
#include "demtg/eval.hpp"
#include "demtg/grad_check.hpp"
#include "demtg/gradcheck_suite.hpp"
#include "demtg/losses.hpp"
#include "demtg/metrics.hpp"
#include "demtg/model.hpp"
#include "demtg/nn.hpp"
#include "demtg/param_store.hpp"
#include "demtg/prng.hpp"
#include "demtg/tape.hpp"
#include "demtg/task_spec.hpp"
#include "demtg/tensor.hpp"
#include "demtg/train.hpp"
