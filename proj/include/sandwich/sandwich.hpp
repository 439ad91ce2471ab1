#pragma once

#include "sandwich/core/errors.hpp"
#include "sandwich/core/graph.hpp"
#include "sandwich/core/io.hpp"
#include "sandwich/core/rng.hpp"
#include "sandwich/core/tensor.hpp"

#include "sandwich/data/dataset.hpp"
#include "sandwich/data/preprocess.hpp"
#include "sandwich/data/synthgen.hpp"

#include "sandwich/model/forward.hpp"
#include "sandwich/model/optim.hpp"
#include "sandwich/model/params.hpp"
#include "sandwich/model/spec.hpp"

#include "sandwich/align/mmd.hpp"

#include "sandwich/fed/messages.hpp"
#include "sandwich/fed/monolithic.hpp"
#include "sandwich/fed/system.hpp"

#include "sandwich/eval/metrics.hpp"

#include "sandwich/experiment.hpp"
