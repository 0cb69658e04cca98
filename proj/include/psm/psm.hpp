#pragma once

#include "psm/common.hpp"
#include "psm/corpus.hpp"
#include "psm/miner.hpp"
#include "psm/model.hpp"
#include "psm/loss.hpp"
#include "psm/trainer.hpp"
#include "psm/eval.hpp"
#include "psm/synth.hpp"
#include "psm/ablation.hpp"
