#pragma once

#include "uamix/checkpoint.hpp"
#include "uamix/config.hpp"
#include "uamix/dataset.hpp"
#include "uamix/encoder.hpp"
#include "uamix/error.hpp"
#include "uamix/fbank.hpp"
#include "uamix/fewshot.hpp"
#include "uamix/mixing.hpp"
#include "uamix/objective.hpp"
#include "uamix/optim.hpp"
#include "uamix/pipeline.hpp"
#include "uamix/synth.hpp"
#include "uamix/tuning.hpp"
