#pragma once

#include "milpath/adam.hpp"
#include "milpath/attention_map.hpp"
#include "milpath/checkpoint.hpp"
#include "milpath/error.hpp"
#include "milpath/expression.hpp"
#include "milpath/feature_bag.hpp"
#include "milpath/fetch.hpp"
#include "milpath/gmt.hpp"
#include "milpath/io.hpp"
#include "milpath/labels.hpp"
#include "milpath/manifest.hpp"
#include "milpath/metrics.hpp"
#include "milpath/model_io.hpp"
#include "milpath/models.hpp"
#include "milpath/params.hpp"
#include "milpath/png.hpp"
#include "milpath/rng.hpp"
#include "milpath/split.hpp"
#include "milpath/ssgsea.hpp"
#include "milpath/synthetic.hpp"
#include "milpath/tensor.hpp"
#include "milpath/train.hpp"
