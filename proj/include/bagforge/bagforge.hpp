#pragma once

#include "bagforge/aggregators.hpp"
#include "bagforge/bag.hpp"
#include "bagforge/bag_io.hpp"
#include "bagforge/checkpoint.hpp"
#include "bagforge/dataset.hpp"
#include "bagforge/error.hpp"
#include "bagforge/gradcheck.hpp"
#include "bagforge/metrics.hpp"
#include "bagforge/model.hpp"
#include "bagforge/optim.hpp"
#include "bagforge/random.hpp"
#include "bagforge/tensor.hpp"
#include "bagforge/train.hpp"
#include "bagforge/tsne.hpp"
