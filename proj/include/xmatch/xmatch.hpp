#pragma once

#include "xmatch/ablation.hpp"
#include "xmatch/checkpoint.hpp"
#include "xmatch/cre.hpp"
#include "xmatch/data.hpp"
#include "xmatch/errors.hpp"
#include "xmatch/eval.hpp"
#include "xmatch/gradients.hpp"
#include "xmatch/losses.hpp"
#include "xmatch/model.hpp"
#include "xmatch/prototypes.hpp"
#include "xmatch/trainer.hpp"
#include "xmatch/util.hpp"
