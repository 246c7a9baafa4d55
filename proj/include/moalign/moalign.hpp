#pragma once

#include "moalign/adam.hpp"
#include "moalign/config.hpp"
#include "moalign/encoder.hpp"
#include "moalign/encoding.hpp"
#include "moalign/errors.hpp"
#include "moalign/eval.hpp"
#include "moalign/gradcheck.hpp"
#include "moalign/kg.hpp"
#include "moalign/loss.hpp"
#include "moalign/params.hpp"
#include "moalign/rng.hpp"
#include "moalign/synth.hpp"
#include "moalign/tensor.hpp"
#include "moalign/train.hpp"
