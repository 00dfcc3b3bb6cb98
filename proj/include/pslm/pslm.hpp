#pragma once

#include "pslm/errors.hpp"
#include "pslm/vocab.hpp"
#include "pslm/token_streams.hpp"
#include "pslm/model.hpp"
#include "pslm/training.hpp"
#include "pslm/decoding.hpp"
#include "pslm/stream_vocoder.hpp"
#include "pslm/latency.hpp"
#include "pslm/metrics.hpp"
#include "pslm/corpus.hpp"
#include "pslm/io.hpp"
