#pragma once

#include "tmpq/numerics.hpp"
#include "tmpq/quant.hpp"
#include "tmpq/nn.hpp"
#include "tmpq/diffusion.hpp"
#include "tmpq/calibration.hpp"
#include "tmpq/grouping.hpp"
#include "tmpq/cost.hpp"
#include "tmpq/candidate.hpp"
#include "tmpq/metrics.hpp"
#include "tmpq/search.hpp"
#include "tmpq/pipeline.hpp"
