#pragma once

#include "sceneiqa/autograd.hpp"
#include "sceneiqa/checkpoint.hpp"
#include "sceneiqa/core.hpp"
#include "sceneiqa/error.hpp"
#include "sceneiqa/image.hpp"
#include "sceneiqa/inference.hpp"
#include "sceneiqa/losses.hpp"
#include "sceneiqa/metrics.hpp"
#include "sceneiqa/models.hpp"
#include "sceneiqa/stats.hpp"
#include "sceneiqa/training.hpp"
