#pragma once

#include "iodf/bench.hpp"
#include "iodf/checkpoint.hpp"
#include "iodf/compressor.hpp"
#include "iodf/config.hpp"
#include "iodf/conv.hpp"
#include "iodf/data.hpp"
#include "iodf/flow.hpp"
#include "iodf/logistic.hpp"
#include "iodf/quant.hpp"
#include "iodf/random.hpp"
#include "iodf/rans.hpp"
#include "iodf/tape.hpp"
#include "iodf/tensor.hpp"
#include "iodf/train.hpp"
