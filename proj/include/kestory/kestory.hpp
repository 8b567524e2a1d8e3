#pragma once

#include "kestory/corpus.hpp"
#include "kestory/decoding.hpp"
#include "kestory/error.hpp"
#include "kestory/evaluation.hpp"
#include "kestory/knowledge.hpp"
#include "kestory/rng.hpp"
#include "kestory/tensor.hpp"
#include "kestory/tokenizer.hpp"
#include "kestory/training.hpp"
#include "kestory/transformer.hpp"
