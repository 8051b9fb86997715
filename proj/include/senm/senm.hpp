#pragma once

#include "senm/batch.hpp"
#include "senm/config.hpp"
#include "senm/datasets.hpp"
#include "senm/distcore.hpp"
#include "senm/errors.hpp"
#include "senm/eval.hpp"
#include "senm/generator.hpp"
#include "senm/model.hpp"
#include "senm/objective.hpp"
#include "senm/schedule.hpp"
#include "senm/trainer.hpp"
