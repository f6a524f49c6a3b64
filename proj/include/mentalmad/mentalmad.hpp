#pragma once

#include "mentalmad/annotation.hpp"
#include "mentalmad/annotation_server.hpp"
#include "mentalmad/cocodistill.hpp"
#include "mentalmad/config.hpp"
#include "mentalmad/corpus.hpp"
#include "mentalmad/error.hpp"
#include "mentalmad/evaluation.hpp"
#include "mentalmad/evosa.hpp"
#include "mentalmad/llm_gateway.hpp"
#include "mentalmad/prefilter.hpp"
#include "mentalmad/prompts.hpp"
#include "mentalmad/supervision.hpp"
