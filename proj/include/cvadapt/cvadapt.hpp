#pragma once

#include "cvadapt/adam.hpp"
#include "cvadapt/adapter.hpp"
#include "cvadapt/aic.hpp"
#include "cvadapt/empl.hpp"
#include "cvadapt/error.hpp"
#include "cvadapt/featstore.hpp"
#include "cvadapt/retrieval.hpp"
#include "cvadapt/synthbench.hpp"
#include "cvadapt/trainer.hpp"
