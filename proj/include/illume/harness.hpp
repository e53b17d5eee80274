#pragma once

#include <map>
#include <string>
#include <vector>

#include "illume/diffusion.hpp"
#include "illume/dualvitok.hpp"
#include "illume/toydata.hpp"
#include "illume/unilm.hpp"

namespace illume::harness {

// ===== run configuration =====

struct DataConfig {
  idx img = 16;      // base square training resolution
  idx n_train = 64;  // procedural training images
  idx n_eval = 16;   // held-out images (disjoint seed stream)
};

struct TrainBudget {
  idx steps = 300;
  idx batch = 8;
  double lr = 1e-3;
  idx eval_every = 100;
};

struct LmSpec {
  idx layers = 2, heads = 2, dim = 64, context = 640;
  idx text_vocab = 32;
  idx h_max = 8, w_max = 8;
  bool continuous_input = true;
  idx mask_text_id = 0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  dualvitok::TokenizerConfig tok;
  LmSpec lm;
  diffusion::DiffusionConfig diff;
  diffusion::CondMaskSpec cond_mask;
  DataConfig data;
  TrainBudget tok_train, lm_train, diff_train;

  std::uint64_t hash() const;  // structural, over the canonical dump
};

// Committed toy protocol: the sizes and budgets every scripted comparison
// and the acceptance run share. Tuned to finish on one desktop core.
RunConfig toy_protocol();

// Strict parser over the nested document: unknown keys are rejected with
// the offending path, partial sections inherit defaults.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& cfg);

// Vocabulary layout and model config the run's modules agree on.
seqcodec::VocabLayout layout_for(const RunConfig& cfg);
unilm::ModelConfig lm_config(const RunConfig& cfg);

// ===== metrics stream =====

struct MetricsRecord {
  idx step = 0;
  std::map<std::string, double> values;

  std::string to_json() const;
};

void append_metrics(const std::string& path, const MetricsRecord& rec);

// ===== tokenizer protocol =====

struct EvalSummary {
  double psnr = 0, ssim = 0, sem_cosine = 0;
  double util_sem = 0, util_pix = 0;
};

EvalSummary eval_tokenizer(const dualvitok::DualViTok<double>& tok,
                           const Tensor<double>& images);

std::vector<MetricsRecord> train_tokenizer(dualvitok::DualViTok<double>& tok,
                                           const RunConfig& cfg,
                                           const std::string& metrics_path = "");

// Deterministic data streams for a run.
Tensor<double> train_images(const RunConfig& cfg, idx h, idx w);
Tensor<double> eval_images(const RunConfig& cfg, idx h, idx w);

// encode one {H,W,3} image into the block + pre-quantization feature rows
// the language model consumes
struct TokenizedImage {
  seqcodec::ImageTokenBlock block;
  Tensor<double> sem_feats;  // {sh*sw, D}
  Tensor<double> pix_feats;  // {ph*pw, D}
};

TokenizedImage tokenize_image(const dualvitok::DualViTok<double>& tok,
                              const Tensor<double>& img);

// ===== stage orchestration =====

// Stage 1: vision embeddings, head rows and adapters on the image
// reconstruction task (LM body frozen). Stage 2: full model, two fixed
// square sub-stages. Stage 3: full model on anyres data with the editing
// task mixed in. Each stage writes out_dir/stage<k>.ntc plus a metrics
// stream and requires its predecessor's checkpoint.
void run_stage(const RunConfig& cfg, int stage);

// Adam filter for the Stage-1 trainable set.
bool stage1_trainable(const std::string& name);

// Teacher-forced exact-match accuracy at the supervised positions.
double token_accuracy(const unilm::UnifiedLM<double>& lm,
                      const std::vector<unilm::MultimodalSequence<double>>& batch);

// ===== diffusion protocol =====

std::vector<MetricsRecord> train_diffusion(
    diffusion::DiffusionDecoder<double>& dec,
    const dualvitok::DualViTok<double>& tok, const RunConfig& cfg,
    const diffusion::CondMaskSpec& spec, const std::string& metrics_path = "");

// ===== ablation =====

struct AblationRow {
  std::string variant;
  double psnr = 0, ssim = 0, sem_cosine = 0;
  double util_sem = 0, util_pix = 0;
  double final_loss = 0;
  double token_accuracy = 0;  // input_mode axis only
};

extern const std::vector<std::string> ablation_axes;

std::vector<AblationRow> run_ablation(const RunConfig& cfg,
                                      const std::string& axis);
std::string ablation_json(const std::string& axis,
                          const std::vector<AblationRow>& rows);

// ===== reconstruction entry point =====

struct ReconstructResult {
  Tensor<double> image;
  double psnr = 0, ssim = 0;
};

ReconstructResult reconstruct_image(const dualvitok::DualViTok<double>& tok,
                                    const Tensor<double>& img,
                                    const dualvitok::NoiseSpec* noise,
                                    std::uint64_t seed);

// ===== token stream files =====

void write_tokens(const std::string& path, const std::vector<idx>& ids);
std::vector<idx> read_tokens(const std::string& path);

}  // namespace illume::harness
