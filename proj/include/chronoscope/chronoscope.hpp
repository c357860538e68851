#pragma once

// Every public header of the library.

#include "chronoscope/core/binio.hpp"
#include "chronoscope/core/error.hpp"
#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/io.hpp"
#include "chronoscope/core/parallel.hpp"
#include "chronoscope/core/split.hpp"
#include "chronoscope/core/types.hpp"
#include "chronoscope/core/validate.hpp"
#include "chronoscope/core/vocabulary.hpp"
#include "chronoscope/synth/cohort.hpp"
#include "chronoscope/tokenizer/tokenizer.hpp"
#include "chronoscope/encoder/checkpoint.hpp"
#include "chronoscope/encoder/config.hpp"
#include "chronoscope/encoder/model.hpp"
#include "chronoscope/encoder/params.hpp"
#include "chronoscope/encoder/pretrain.hpp"
#include "chronoscope/encoder/supervised.hpp"
#include "chronoscope/survival/case_cohort.hpp"
#include "chronoscope/survival/cox.hpp"
#include "chronoscope/survival/km.hpp"
#include "chronoscope/survival/pca.hpp"
#include "chronoscope/metrics/bootstrap.hpp"
#include "chronoscope/metrics/metrics.hpp"
#include "chronoscope/curation/curation.hpp"
#include "chronoscope/retrieval/index.hpp"
#include "chronoscope/attribution/attribution.hpp"
#include "chronoscope/cli/evaluation.hpp"
#include "chronoscope/cli/pipeline.hpp"
#include "chronoscope/cli/report.hpp"
