#pragma once

#include "dam/checkpoint.hpp"
#include "dam/config.hpp"
#include "dam/data.hpp"
#include "dam/embedding.hpp"
#include "dam/evaluation.hpp"
#include "dam/image_io.hpp"
#include "dam/metagen.hpp"
#include "dam/metricnet.hpp"
#include "dam/model.hpp"
#include "dam/ops.hpp"
#include "dam/pipeline.hpp"
#include "dam/random.hpp"
#include "dam/runtime.hpp"
#include "dam/tape.hpp"
#include "dam/tensor.hpp"
#include "dam/trainer.hpp"
