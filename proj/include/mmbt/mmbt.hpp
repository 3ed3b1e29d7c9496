// Umbrella header.
#pragma once

#include "mmbt/accounting.hpp"
#include "mmbt/audio.hpp"
#include "mmbt/checkpoint.hpp"
#include "mmbt/config.hpp"
#include "mmbt/encoder.hpp"
#include "mmbt/fusion.hpp"
#include "mmbt/gradcheck.hpp"
#include "mmbt/metrics.hpp"
#include "mmbt/model.hpp"
#include "mmbt/objectives.hpp"
#include "mmbt/optim.hpp"
#include "mmbt/synthetic.hpp"
#include "mmbt/trainer.hpp"
