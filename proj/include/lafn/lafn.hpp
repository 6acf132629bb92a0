#pragma once

// Everything except the HTTP paraphrase client (include that separately; it
// pulls in httplib).

#include "lafn/error.hpp"
#include "lafn/random.hpp"
#include "lafn/tensor.hpp"
#include "lafn/optim.hpp"
#include "lafn/tokenizer.hpp"
#include "lafn/model.hpp"
#include "lafn/model_io.hpp"
#include "lafn/train.hpp"
#include "lafn/data.hpp"
#include "lafn/world.hpp"
#include "lafn/parallel.hpp"
#include "lafn/locator.hpp"
#include "lafn/editor.hpp"
#include "lafn/cache.hpp"
#include "lafn/metrics.hpp"
#include "lafn/eval.hpp"
#include "lafn/pipeline.hpp"
