#pragma once

#include "vitmix/common.hpp"
#include "vitmix/rng.hpp"
#include "vitmix/tensor.hpp"
#include "vitmix/patches.hpp"
#include "vitmix/encoder.hpp"
#include "vitmix/synthesizer.hpp"
#include "vitmix/mixing.hpp"
#include "vitmix/optim.hpp"
#include "vitmix/checkpoint.hpp"
#include "vitmix/trainer.hpp"
#include "vitmix/image_io.hpp"
#include "vitmix/corpus.hpp"
#include "vitmix/classifier.hpp"
#include "vitmix/evaluation.hpp"
