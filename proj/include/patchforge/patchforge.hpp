#pragma once

#include "patchforge/errors.hpp"
#include "patchforge/tensor.hpp"
#include "patchforge/kernels.hpp"
#include "patchforge/tape.hpp"
#include "patchforge/params.hpp"
#include "patchforge/checkpoint.hpp"
#include "patchforge/image.hpp"
#include "patchforge/patches.hpp"
#include "patchforge/aggregation.hpp"
#include "patchforge/head.hpp"
#include "patchforge/model.hpp"
#include "patchforge/datagen.hpp"
#include "patchforge/evaluator.hpp"
#include "patchforge/trainer.hpp"
#include "patchforge/localizer.hpp"
