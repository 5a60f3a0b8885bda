#pragma once

#include "first/bundle.hpp"
#include "first/config.hpp"
#include "first/csv.hpp"
#include "first/dataset.hpp"
#include "first/errors.hpp"
#include "first/experiment.hpp"
#include "first/generate.hpp"
#include "first/lora.hpp"
#include "first/lora_merge.hpp"
#include "first/metrics.hpp"
#include "first/model.hpp"
#include "first/model_config.hpp"
#include "first/ops.hpp"
#include "first/oracle.hpp"
#include "first/rng.hpp"
#include "first/router.hpp"
#include "first/tensor.hpp"
#include "first/tokenizer.hpp"
#include "first/training.hpp"
