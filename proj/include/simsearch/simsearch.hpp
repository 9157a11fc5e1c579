#pragma once

#include "simsearch/core.hpp"
#include "simsearch/data.hpp"
#include "simsearch/emb1.hpp"
#include "simsearch/error.hpp"
#include "simsearch/eval.hpp"
#include "simsearch/index.hpp"
#include "simsearch/ingest.hpp"
#include "simsearch/model.hpp"
#include "simsearch/optimizer.hpp"
#include "simsearch/train.hpp"
#include "simsearch/triplet.hpp"
