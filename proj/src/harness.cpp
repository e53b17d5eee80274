#include "illume/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "illume/checkpoint.hpp"
#include "illume/datapipe.hpp"
#include "illume/metrics.hpp"

namespace illume::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ===== config parsing =====

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw DomainError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw DomainError("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

vq::QuantizerKind quantizer_from(const std::string& s) {
  if (s == "vanilla") return vq::QuantizerKind::vanilla;
  if (s == "simvq") return vq::QuantizerKind::simvq;
  throw DomainError("config: unknown quantizer '" + s + "'");
}

void parse_budget(const json& j, const std::string& where, TrainBudget& b) {
  check_keys(j, where, {"steps", "batch", "lr", "eval_every"});
  get(j, "steps", b.steps);
  get(j, "batch", b.batch);
  get(j, "lr", b.lr);
  get(j, "eval_every", b.eval_every);
}

void parse_tokenizer(const json& j, dualvitok::TokenizerConfig& t) {
  check_keys(j, "tokenizer",
             {"f_sem", "f_pix", "k_sem", "k_pix", "dim", "width", "heads",
              "backbone_blocks", "sem_dec_blocks", "dc_block", "quantizer",
              "branch", "noise", "noise_sem", "noise_pix", "commitment_weight",
              "w_cos", "w_l1", "w_p", "w_g"});
  get(j, "f_sem", t.f_sem);
  get(j, "f_pix", t.f_pix);
  get(j, "k_sem", t.k_sem);
  get(j, "k_pix", t.k_pix);
  get(j, "dim", t.dim);
  get(j, "width", t.width);
  get(j, "heads", t.heads);
  get(j, "backbone_blocks", t.backbone_blocks);
  get(j, "sem_dec_blocks", t.sem_dec_blocks);
  get(j, "dc_block", t.dc_block);
  if (j.contains("quantizer"))
    t.quantizer = quantizer_from(j.at("quantizer").get<std::string>());
  if (j.contains("branch"))
    t.branch = dualvitok::branch_from(j.at("branch").get<std::string>());
  if (j.contains("noise")) {
    const json& n = j.at("noise");
    check_keys(n, "tokenizer.noise", {"kind", "alpha", "beta"});
    if (n.contains("kind"))
      t.noise.kind = dualvitok::noise_kind_from(n.at("kind").get<std::string>());
    get(n, "alpha", t.noise.alpha);
    get(n, "beta", t.noise.beta);
  }
  get(j, "noise_sem", t.noise_sem);
  get(j, "noise_pix", t.noise_pix);
  get(j, "commitment_weight", t.commitment_weight);
  get(j, "w_cos", t.w_cos);
  get(j, "w_l1", t.w_l1);
  get(j, "w_p", t.w_p);
  get(j, "w_g", t.w_g);
}

void parse_lm(const json& j, LmSpec& l) {
  check_keys(j, "lm",
             {"layers", "heads", "dim", "context", "text_vocab", "h_max",
              "w_max", "continuous_input", "mask_text_id"});
  get(j, "layers", l.layers);
  get(j, "heads", l.heads);
  get(j, "dim", l.dim);
  get(j, "context", l.context);
  get(j, "text_vocab", l.text_vocab);
  get(j, "h_max", l.h_max);
  get(j, "w_max", l.w_max);
  get(j, "continuous_input", l.continuous_input);
  get(j, "mask_text_id", l.mask_text_id);
}

void parse_diffusion(const json& j, diffusion::DiffusionConfig& d) {
  check_keys(j, "diffusion",
             {"timesteps", "beta_start", "beta_end", "width", "depth",
              "upscale"});
  get(j, "timesteps", d.timesteps);
  get(j, "beta_start", d.beta_start);
  get(j, "beta_end", d.beta_end);
  get(j, "width", d.width);
  get(j, "depth", d.depth);
  get(j, "upscale", d.upscale);
}

void parse_cond_mask(const json& j, diffusion::CondMaskSpec& s) {
  check_keys(j, "cond_mask",
             {"sample_perturb_prob", "token_replace_prob", "sem_mask_prob",
              "pix_mask_prob"});
  get(j, "sample_perturb_prob", s.sample_perturb_prob);
  get(j, "token_replace_prob", s.token_replace_prob);
  get(j, "sem_mask_prob", s.sem_mask_prob);
  get(j, "pix_mask_prob", s.pix_mask_prob);
}

void parse_data(const json& j, DataConfig& d) {
  check_keys(j, "data", {"img", "n_train", "n_eval"});
  get(j, "img", d.img);
  get(j, "n_train", d.n_train);
  get(j, "n_eval", d.n_eval);
}

json dump_budget(const TrainBudget& b) {
  return json{{"steps", b.steps},
              {"batch", b.batch},
              {"lr", b.lr},
              {"eval_every", b.eval_every}};
}

// ===== shared helpers =====

Tensor<double> slice_image(const Tensor<double>& batch, idx i) {
  const idx n = batch.dim(0), h = batch.dim(1), w = batch.dim(2),
            c = batch.dim(3);
  Tensor<double> out({h, w, c});
  out.mat(h * w, c) = batch.mat(n * h * w, c).middleRows(i * h * w, h * w);
  return out;
}

Tensor<double> pick_batch(const Tensor<double>& pool, TrainBudget budget,
                          Rng& rng) {
  const idx n = pool.dim(0), h = pool.dim(1), w = pool.dim(2);
  Tensor<double> out({budget.batch, h, w, 3});
  for (idx b = 0; b < budget.batch; ++b) {
    idx i = rng.uniform_int(n);
    out.mat(budget.batch * h * w, 3).middleRows(b * h * w, h * w) =
        pool.mat(n * h * w, 3).middleRows(i * h * w, h * w);
  }
  return out;
}

std::string tokenizer_path(const RunConfig& cfg) {
  return cfg.out_dir + "/tokenizer.ntc";
}
std::string stage_path(const RunConfig& cfg, int stage) {
  return cfg.out_dir + "/stage" + std::to_string(stage) + ".ntc";
}

}  // namespace

// ===== config surface =====

RunConfig toy_protocol() {
  RunConfig c;
  c.seed = 0;
  c.out_dir = "runs/toy";
  c.tok.f_sem = 4;
  c.tok.f_pix = 2;
  c.tok.k_sem = 64;
  c.tok.k_pix = 128;
  c.tok.dim = 16;
  c.tok.width = 24;
  c.tok.heads = 2;
  c.tok.backbone_blocks = 1;
  c.tok.sem_dec_blocks = 1;
  c.tok.noise = {dualvitok::NoiseKind::random, 0.1, 0.1};
  c.lm.layers = 2;
  c.lm.heads = 2;
  c.lm.dim = 64;
  c.lm.context = 640;
  c.lm.text_vocab = 32;
  c.lm.h_max = 8;
  c.lm.w_max = 8;
  c.diff.timesteps = 50;
  c.diff.width = 16;
  c.diff.depth = 2;
  c.data.img = 16;
  c.data.n_train = 64;
  c.data.n_eval = 16;
  c.tok_train = {1500, 8, 1e-3, 250};
  c.lm_train = {300, 4, 1e-3, 100};
  c.diff_train = {300, 8, 1e-3, 100};
  return c;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DomainError(std::string("config: ") + e.what());
  }
  RunConfig c;
  try {
    check_keys(j, "the top level",
               {"seed", "out_dir", "tokenizer", "lm", "diffusion", "cond_mask",
                "data", "tok_train", "lm_train", "diff_train"});
    get(j, "seed", c.seed);
    get(j, "out_dir", c.out_dir);
    if (j.contains("tokenizer")) parse_tokenizer(j.at("tokenizer"), c.tok);
    if (j.contains("lm")) parse_lm(j.at("lm"), c.lm);
    if (j.contains("diffusion")) parse_diffusion(j.at("diffusion"), c.diff);
    if (j.contains("cond_mask")) parse_cond_mask(j.at("cond_mask"), c.cond_mask);
    if (j.contains("data")) parse_data(j.at("data"), c.data);
    if (j.contains("tok_train"))
      parse_budget(j.at("tok_train"), "tok_train", c.tok_train);
    if (j.contains("lm_train"))
      parse_budget(j.at("lm_train"), "lm_train", c.lm_train);
    if (j.contains("diff_train"))
      parse_budget(j.at("diff_train"), "diff_train", c.diff_train);
  } catch (const json::exception& e) {
    throw DomainError(std::string("config: ") + e.what());
  }
  dualvitok::validate(c.tok);
  diffusion::validate(c.diff);
  diffusion::validate(c.cond_mask);
  unilm::validate(lm_config(c));
  if (c.data.img < 1 || c.data.n_train < 1 || c.data.n_eval < 1)
    throw DomainError("config: data sizes must be positive");
  if (c.data.img % c.tok.divisor() != 0)
    throw DomainError("config: data.img must be divisible by the tokenizer factors");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["tokenizer"] = {
      {"f_sem", c.tok.f_sem},
      {"f_pix", c.tok.f_pix},
      {"k_sem", c.tok.k_sem},
      {"k_pix", c.tok.k_pix},
      {"dim", c.tok.dim},
      {"width", c.tok.width},
      {"heads", c.tok.heads},
      {"backbone_blocks", c.tok.backbone_blocks},
      {"sem_dec_blocks", c.tok.sem_dec_blocks},
      {"dc_block", c.tok.dc_block},
      {"quantizer", vq::kind_name(c.tok.quantizer)},
      {"branch", dualvitok::branch_name(c.tok.branch)},
      {"noise",
       {{"kind", dualvitok::noise_kind_name(c.tok.noise.kind)},
        {"alpha", c.tok.noise.alpha},
        {"beta", c.tok.noise.beta}}},
      {"noise_sem", c.tok.noise_sem},
      {"noise_pix", c.tok.noise_pix},
      {"commitment_weight", c.tok.commitment_weight},
      {"w_cos", c.tok.w_cos},
      {"w_l1", c.tok.w_l1},
      {"w_p", c.tok.w_p},
      {"w_g", c.tok.w_g}};
  j["lm"] = {{"layers", c.lm.layers},
             {"heads", c.lm.heads},
             {"dim", c.lm.dim},
             {"context", c.lm.context},
             {"text_vocab", c.lm.text_vocab},
             {"h_max", c.lm.h_max},
             {"w_max", c.lm.w_max},
             {"continuous_input", c.lm.continuous_input},
             {"mask_text_id", c.lm.mask_text_id}};
  j["diffusion"] = {{"timesteps", c.diff.timesteps},
                    {"beta_start", c.diff.beta_start},
                    {"beta_end", c.diff.beta_end},
                    {"width", c.diff.width},
                    {"depth", c.diff.depth},
                    {"upscale", c.diff.upscale}};
  j["cond_mask"] = {{"sample_perturb_prob", c.cond_mask.sample_perturb_prob},
                    {"token_replace_prob", c.cond_mask.token_replace_prob},
                    {"sem_mask_prob", c.cond_mask.sem_mask_prob},
                    {"pix_mask_prob", c.cond_mask.pix_mask_prob}};
  j["data"] = {{"img", c.data.img},
               {"n_train", c.data.n_train},
               {"n_eval", c.data.n_eval}};
  j["tok_train"] = dump_budget(c.tok_train);
  j["lm_train"] = dump_budget(c.lm_train);
  j["diff_train"] = dump_budget(c.diff_train);
  return j.dump(2);
}

std::uint64_t RunConfig::hash() const { return fnv1a64(dump_run_config(*this)); }

seqcodec::VocabLayout layout_for(const RunConfig& cfg) {
  const idx g = std::gcd(cfg.tok.f_sem, cfg.tok.f_pix);
  return seqcodec::layout_build(cfg.lm.text_vocab, cfg.tok.k_sem,
                                cfg.tok.k_pix, cfg.lm.h_max, cfg.lm.w_max,
                                cfg.tok.f_sem / g, cfg.tok.f_pix / g);
}

unilm::ModelConfig lm_config(const RunConfig& cfg) {
  unilm::ModelConfig mc;
  mc.layers = cfg.lm.layers;
  mc.heads = cfg.lm.heads;
  mc.dim = cfg.lm.dim;
  mc.context = cfg.lm.context;
  mc.layout = layout_for(cfg);
  mc.feature_dim = cfg.tok.dim;
  mc.mask_text_id = cfg.lm.mask_text_id;
  mc.continuous_input = cfg.lm.continuous_input;
  return mc;
}

// ===== metrics stream =====

std::string MetricsRecord::to_json() const {
  json j;
  j["step"] = step;
  for (const auto& [k, v] : values) j[k] = v;
  return j.dump();
}

void append_metrics(const std::string& path, const MetricsRecord& rec) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("metrics: cannot open " + path);
  f << rec.to_json() << '\n';
}

// ===== data streams =====

Tensor<double> train_images(const RunConfig& cfg, idx h, idx w) {
  Rng rng(cfg.seed ^ 0xda7a0001ull);
  return toydata::shape_batch<double>(cfg.data.n_train, h, w, rng);
}

Tensor<double> eval_images(const RunConfig& cfg, idx h, idx w) {
  Rng rng(cfg.seed ^ 0xda7a0002ull);
  return toydata::shape_batch<double>(cfg.data.n_eval, h, w, rng);
}

// ===== tokenizer protocol =====

EvalSummary eval_tokenizer(const dualvitok::DualViTok<double>& tok,
                           const Tensor<double>& images) {
  const idx n = images.dim(0), h = images.dim(1), w = images.dim(2);
  auto enc = tok.encode(images);
  Tensor<double> recon = tok.decode(enc.sem_indices, enc.pix_indices);

  EvalSummary s;
  const idx window = std::min<idx>(7, std::min(h, w));
  for (idx i = 0; i < n; ++i) {
    Tensor<double> a = slice_image(images, i);
    Tensor<double> b = slice_image(recon, i);
    s.psnr += psnr(b, a);
    s.ssim += ssim(b, a, window);
  }
  s.psnr /= static_cast<double>(n);
  s.ssim /= static_cast<double>(n);

  if (tok.has_sem()) {
    Tensor<double> target = tok.backbone_features(images);
    const idx rows = target.numel() / target.dims().back();
    s.sem_cosine = cosine_rows(tok.decode_sem_features(enc.sem_indices),
                               target.reshaped({rows, target.dims().back()}));
    vq::UtilizationAccum acc(tok.config().k_sem);
    for (const auto& g : enc.sem_indices) acc.add(g);
    s.util_sem = acc.report().utilization;
  } else {
    // no semantic branch: measure how much of the frozen backbone's view
    // of the image survives reconstruction
    Tensor<double> a = tok.backbone_features(recon);
    Tensor<double> b = tok.backbone_features(images);
    s.sem_cosine = cosine_rows(a, b);
  }
  if (tok.has_pix()) {
    vq::UtilizationAccum acc(tok.config().k_pix);
    for (const auto& g : enc.pix_indices) acc.add(g);
    s.util_pix = acc.report().utilization;
  }
  return s;
}

std::vector<MetricsRecord> train_tokenizer(dualvitok::DualViTok<double>& tok,
                                           const RunConfig& cfg,
                                           const std::string& metrics_path) {
  const idx img = cfg.data.img;
  Tensor<double> train = train_images(cfg, img, img);
  Tensor<double> held = eval_images(cfg, img, img);
  Adam<double> gen(AdamConfig{cfg.tok_train.lr});
  Adam<double> disc(AdamConfig{cfg.tok_train.lr});
  Rng rng(cfg.seed ^ 0x70cbeefull);

  std::vector<MetricsRecord> records;
  for (idx step = 0; step < cfg.tok_train.steps; ++step) {
    Tensor<double> batch = pick_batch(train, cfg.tok_train, rng);
    auto rep = tok.train_step(batch, gen, disc, rng, step, cfg.tok_train.steps);
    if (rep.diverged)
      throw DomainError("tokenizer training diverged at step " +
                        std::to_string(step));
    if ((step + 1) % cfg.tok_train.eval_every == 0 ||
        step + 1 == cfg.tok_train.steps) {
      EvalSummary es = eval_tokenizer(tok, held);
      MetricsRecord r;
      r.step = step + 1;
      r.values = {{"loss_total", rep.total},
                  {"cosine_sem", rep.cosine_sem},
                  {"l1_pix", rep.l1_pix},
                  {"perceptual", rep.perceptual},
                  {"gan_g", rep.gan_g},
                  {"gan_d", rep.gan_d},
                  {"vq_sem", rep.vq_sem},
                  {"vq_pix", rep.vq_pix},
                  {"psnr", es.psnr},
                  {"ssim", es.ssim},
                  {"sem_cosine", es.sem_cosine},
                  {"util_sem", es.util_sem},
                  {"util_pix", es.util_pix}};
      records.push_back(r);
      if (!metrics_path.empty()) append_metrics(metrics_path, r);
    }
  }
  return records;
}

TokenizedImage tokenize_image(const dualvitok::DualViTok<double>& tok,
                              const Tensor<double>& img) {
  if (!tok.has_sem() || !tok.has_pix())
    throw DomainError("tokenize_image: the language model needs both branches");
  auto enc = tok.encode(img);
  TokenizedImage t;
  t.block.sem_indices = enc.sem_indices[0];
  t.block.pix_indices = enc.pix_indices[0];
  t.block.sem_h = t.block.sem_indices.rows();
  t.block.sem_w = t.block.sem_indices.cols();
  t.block.pix_h = t.block.pix_indices.rows();
  t.block.pix_w = t.block.pix_indices.cols();
  const idx d = tok.config().dim;
  t.sem_feats = enc.sem_features.reshaped({t.block.sem_h * t.block.sem_w, d});
  t.pix_feats = enc.pix_features.reshaped({t.block.pix_h * t.block.pix_w, d});
  return t;
}

// ===== stage orchestration =====

bool stage1_trainable(const std::string& name) {
  return name == "embed.w" || name == "head.w" || name == "head.b" ||
         name.rfind("sem_adapter.", 0) == 0 ||
         name.rfind("pix_adapter.", 0) == 0;
}

double token_accuracy(
    const unilm::UnifiedLM<double>& lm,
    const std::vector<unilm::MultimodalSequence<double>>& batch) {
  NoGradGuard ng;
  long correct = 0, total = 0;
  for (const auto& seq : batch) {
    Tensor<double> logits = lm.forward_logits(seq).value();
    auto m = logits.mat();
    for (idx t = 1; t < seq.size(); ++t) {
      if (!seq.elems[static_cast<std::size_t>(t)].supervised) continue;
      Eigen::Index arg = 0;
      m.row(t - 1).maxCoeff(&arg);
      correct += static_cast<idx>(arg) ==
                 seq.elems[static_cast<std::size_t>(t)].id;
      ++total;
    }
  }
  if (total == 0) throw DomainError("token_accuracy: no supervised positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

namespace {

using Seq = unilm::MultimodalSequence<double>;

Seq recon_seq(const seqcodec::VocabLayout& layout, const TokenizedImage& ti) {
  Seq seq;
  unilm::append_image_input(seq, layout, ti.block, ti.sem_feats, ti.pix_feats);
  unilm::append_image_target(seq, layout, ti.block);
  return seq;
}

Seq gen_seq(const seqcodec::VocabLayout& layout, const std::vector<idx>& prompt,
            const seqcodec::ImageTokenBlock& block) {
  Seq seq;
  unilm::append_text(seq, prompt, false);
  unilm::append_image_target(seq, layout, block);
  return seq;
}

Seq edit_seq(const seqcodec::VocabLayout& layout, const TokenizedImage& src,
             const std::vector<idx>& instruction,
             const seqcodec::ImageTokenBlock& target) {
  Seq seq;
  unilm::append_image_input(seq, layout, src.block, src.sem_feats,
                            src.pix_feats);
  unilm::append_text(seq, instruction, false);
  unilm::append_image_target(seq, layout, target);
  return seq;
}

std::vector<idx> prompt_for(idx sample, idx text_vocab) {
  return toydata::instruction_ids("shape " + std::to_string(sample),
                                  text_vocab);
}

// The anyres resolution cycle Stage 3 trains on: every supported ratio,
// scaled under the pixel budget with tokenizer-divisible dims.
std::vector<std::pair<idx, idx>> anyres_cycle(const RunConfig& cfg) {
  datapipe::StagePlan plan;
  plan.id = 3;
  plan.mode = datapipe::ResMode::anyres;
  plan.pixel_budget = cfg.data.img * cfg.data.img;
  plan.divisor = cfg.tok.divisor();
  std::vector<std::pair<idx, idx>> out;
  for (const auto& r : datapipe::aspect_ratios()) {
    std::pair<idx, idx> hw;
    try {
      hw = datapipe::stage_resolution(plan, r.num * 24, r.den * 24);
    } catch (const DomainError&) {
      continue;  // ratio too elongated for this pixel budget
    }
    if (hw.first >= plan.divisor && hw.second >= plan.divisor)
      out.push_back(hw);
  }
  if (out.empty()) throw DomainError("stage 3: pixel budget admits no resolution");
  return out;
}

}  // namespace

void run_stage(const RunConfig& cfg, int stage) {
  if (stage < 1 || stage > 3)
    throw DomainError("run_stage: stage must be 1, 2 or 3");
  fs::create_directories(cfg.out_dir);

  dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0x70c0deull);
  const std::string tok_ck = tokenizer_path(cfg);
  if (!fs::exists(tok_ck))
    throw IoError("stage " + std::to_string(stage) +
                  " requires the tokenizer checkpoint: " + tok_ck);
  load_checkpoint(tok_ck, tok.params(), cfg.hash());

  unilm::ModelConfig mc = lm_config(cfg);
  unilm::UnifiedLM<double> lm(mc, cfg.seed ^ 0x1a0001ull);
  if (stage >= 2) {
    const std::string prev = stage_path(cfg, stage - 1);
    if (!fs::exists(prev))
      throw IoError("stage " + std::to_string(stage) + " requires the stage " +
                    std::to_string(stage - 1) + " checkpoint: " + prev);
    load_checkpoint(prev, lm.params(), cfg.hash());
  }

  const auto layout = layout_for(cfg);
  Adam<double> opt(AdamConfig{cfg.lm_train.lr});
  Rng rng(cfg.seed ^ (0x57a6e000ull + static_cast<std::uint64_t>(stage)));
  const std::string metrics_path =
      cfg.out_dir + "/stage" + std::to_string(stage) + "_metrics.jsonl";
  std::ofstream(metrics_path, std::ios::trunc);

  // tokenized pools per resolution, built lazily
  std::map<std::pair<idx, idx>, std::vector<TokenizedImage>> pools;
  auto pool_at = [&](idx h, idx w) -> const std::vector<TokenizedImage>& {
    auto key = std::make_pair(h, w);
    auto it = pools.find(key);
    if (it != pools.end()) return it->second;
    Tensor<double> imgs = train_images(cfg, h, w);
    std::vector<TokenizedImage> v;
    v.reserve(static_cast<std::size_t>(imgs.dim(0)));
    for (idx i = 0; i < imgs.dim(0); ++i)
      v.push_back(tokenize_image(tok, slice_image(imgs, i)));
    return pools.emplace(key, std::move(v)).first->second;
  };
  // editing pairs carry the inverted image's block as the target
  std::map<std::pair<idx, idx>, std::vector<seqcodec::ImageTokenBlock>>
      inv_pools;
  auto inv_pool_at =
      [&](idx h, idx w) -> const std::vector<seqcodec::ImageTokenBlock>& {
    auto key = std::make_pair(h, w);
    auto it = inv_pools.find(key);
    if (it != inv_pools.end()) return it->second;
    Tensor<double> imgs = train_images(cfg, h, w);
    std::vector<seqcodec::ImageTokenBlock> v;
    v.reserve(static_cast<std::size_t>(imgs.dim(0)));
    for (idx i = 0; i < imgs.dim(0); ++i)
      v.push_back(
          tokenize_image(tok, toydata::invert(slice_image(imgs, i))).block);
    return inv_pools.emplace(key, std::move(v)).first->second;
  };

  const std::vector<idx> edit_instruction =
      toydata::instruction_ids("invert colors", cfg.lm.text_vocab);
  const auto anyres = stage == 3 ? anyres_cycle(cfg)
                                 : std::vector<std::pair<idx, idx>>{};

  const idx steps = cfg.lm_train.steps;
  for (idx step = 0; step < steps; ++step) {
    idx h = cfg.data.img, w = cfg.data.img;
    if (stage == 2 && step >= steps / 2) h = w = cfg.data.img * 2;
    if (stage == 3) {
      auto hw = anyres[static_cast<std::size_t>(step) % anyres.size()];
      h = hw.first;
      w = hw.second;
    }
    const auto& pool = pool_at(h, w);

    std::vector<Seq> batch;
    for (idx b = 0; b < cfg.lm_train.batch; ++b) {
      idx i = rng.uniform_int(static_cast<idx>(pool.size()));
      const TokenizedImage& ti = pool[static_cast<std::size_t>(i)];
      if (stage == 1) {
        batch.push_back(recon_seq(layout, ti));
      } else if (stage == 2 || step % 2 == 0) {
        batch.push_back(gen_seq(layout, prompt_for(i, cfg.lm.text_vocab),
                                ti.block));
      } else {
        const auto& targets = inv_pool_at(h, w);
        batch.push_back(edit_seq(layout, ti, edit_instruction,
                                 targets[static_cast<std::size_t>(i)]));
      }
    }

    Var<double> loss = lm.next_token_loss(batch);
    if (!loss.value().all_finite())
      throw DomainError("stage " + std::to_string(stage) +
                        " diverged at step " + std::to_string(step));
    lm.params().zero_grad();
    loss.backward();
    if (stage == 1) lm.mask_text_grads();
    if (stage == 1)
      opt.step(lm.params(), stage1_trainable);
    else
      opt.step(lm.params());
    lm.params().zero_grad();

    if ((step + 1) % cfg.lm_train.eval_every == 0 || step + 1 == steps) {
      MetricsRecord r;
      r.step = step + 1;
      r.values = {{"loss", loss.item()},
                  {"token_accuracy", token_accuracy(lm, batch)}};
      append_metrics(metrics_path, r);
    }
  }

  save_checkpoint(stage_path(cfg, stage), lm.params(), cfg.hash());
}

// ===== diffusion protocol =====

std::vector<MetricsRecord> train_diffusion(
    diffusion::DiffusionDecoder<double>& dec,
    const dualvitok::DualViTok<double>& tok, const RunConfig& cfg,
    const diffusion::CondMaskSpec& spec, const std::string& metrics_path) {
  const idx img = cfg.data.img * 2;  // targets live at 2x the token source
  Tensor<double> train = train_images(cfg, img, img);
  Adam<double> opt(AdamConfig{cfg.diff_train.lr});
  Rng rng(cfg.seed ^ 0xd1ff001ull);

  std::vector<MetricsRecord> records;
  for (idx step = 0; step < cfg.diff_train.steps; ++step) {
    Tensor<double> batch = pick_batch(train, cfg.diff_train, rng);
    double loss = dec.train_step(batch, tok, spec, opt, rng);
    if ((step + 1) % cfg.diff_train.eval_every == 0 ||
        step + 1 == cfg.diff_train.steps) {
      MetricsRecord r;
      r.step = step + 1;
      r.values = {{"loss", loss}};
      records.push_back(r);
      if (!metrics_path.empty()) append_metrics(metrics_path, r);
    }
  }
  return records;
}

// ===== ablation =====

const std::vector<std::string> ablation_axes = {
    "quantizer_kind", "codebook_dim", "noise",     "width",
    "dc_block",       "branch",       "input_mode"};

namespace {

AblationRow tokenizer_row(const RunConfig& base, const std::string& name,
                          const dualvitok::TokenizerConfig& variant) {
  RunConfig cfg = base;
  cfg.tok = variant;
  dualvitok::validate(cfg.tok);
  dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0xab1a7eull);
  auto records = train_tokenizer(tok, cfg);
  EvalSummary es =
      eval_tokenizer(tok, eval_images(cfg, cfg.data.img, cfg.data.img));
  AblationRow row;
  row.variant = name;
  row.psnr = es.psnr;
  row.ssim = es.ssim;
  row.sem_cosine = es.sem_cosine;
  row.util_sem = es.util_sem;
  row.util_pix = es.util_pix;
  row.final_loss = records.back().values.at("loss_total");
  return row;
}

AblationRow lm_row(const RunConfig& base, const std::string& name,
                   bool continuous,
                   const dualvitok::DualViTok<double>& tok) {
  RunConfig cfg = base;
  cfg.lm.continuous_input = continuous;
  unilm::ModelConfig mc = lm_config(cfg);
  unilm::UnifiedLM<double> lm(mc, cfg.seed ^ 0x1a0001ull);
  const auto layout = layout_for(cfg);

  Tensor<double> imgs = train_images(cfg, cfg.data.img, cfg.data.img);
  std::vector<TokenizedImage> pool;
  for (idx i = 0; i < imgs.dim(0); ++i)
    pool.push_back(tokenize_image(tok, slice_image(imgs, i)));

  Adam<double> opt(AdamConfig{cfg.lm_train.lr});
  Rng rng(cfg.seed ^ 0x1bbeefull);
  double last = 0;
  for (idx step = 0; step < cfg.lm_train.steps; ++step) {
    std::vector<Seq> batch;
    for (idx b = 0; b < cfg.lm_train.batch; ++b) {
      idx i = rng.uniform_int(static_cast<idx>(pool.size()));
      batch.push_back(recon_seq(layout, pool[static_cast<std::size_t>(i)]));
    }
    Var<double> loss = lm.next_token_loss(batch);
    lm.params().zero_grad();
    loss.backward();
    lm.mask_text_grads();
    opt.step(lm.params(), stage1_trainable);
    lm.params().zero_grad();
    last = loss.item();
  }

  std::vector<Seq> held;
  for (idx i = 0; i < std::min<idx>(8, static_cast<idx>(pool.size())); ++i)
    held.push_back(recon_seq(layout, pool[static_cast<std::size_t>(i)]));
  AblationRow row;
  row.variant = name;
  row.final_loss = last;
  row.token_accuracy = token_accuracy(lm, held);
  return row;
}

}  // namespace

std::vector<AblationRow> run_ablation(const RunConfig& cfg,
                                      const std::string& axis) {
  std::vector<AblationRow> rows;
  if (axis == "quantizer_kind") {
    for (auto kind : {vq::QuantizerKind::vanilla, vq::QuantizerKind::simvq}) {
      auto t = cfg.tok;
      t.quantizer = kind;
      rows.push_back(tokenizer_row(cfg, vq::kind_name(kind), t));
    }
  } else if (axis == "codebook_dim") {
    for (idx d : {8, 16, 32}) {
      auto t = cfg.tok;
      t.dim = d;
      rows.push_back(tokenizer_row(cfg, "dim" + std::to_string(d), t));
    }
  } else if (axis == "noise") {
    const double a = cfg.tok.noise.alpha > 0 ? cfg.tok.noise.alpha : 0.1;
    const double b = cfg.tok.noise.beta > 0 ? cfg.tok.noise.beta : 0.1;
    for (auto kind : {dualvitok::NoiseKind::none, dualvitok::NoiseKind::random,
                      dualvitok::NoiseKind::zero}) {
      auto t = cfg.tok;
      t.noise = {kind, kind == dualvitok::NoiseKind::none ? 0.0 : a,
                 kind == dualvitok::NoiseKind::none ? 0.0 : b};
      rows.push_back(tokenizer_row(cfg, dualvitok::noise_kind_name(kind), t));
    }
  } else if (axis == "width") {
    for (idx w : {cfg.tok.width, cfg.tok.width * 2}) {
      auto t = cfg.tok;
      t.width = w;
      rows.push_back(tokenizer_row(cfg, "width" + std::to_string(w), t));
    }
  } else if (axis == "dc_block") {
    for (bool on : {true, false}) {
      auto t = cfg.tok;
      t.dc_block = on;
      rows.push_back(tokenizer_row(cfg, on ? "dc_block" : "strided", t));
    }
  } else if (axis == "branch") {
    for (auto br : {dualvitok::Branch::semantic_only,
                    dualvitok::Branch::pixel_only, dualvitok::Branch::dual}) {
      auto t = cfg.tok;
      t.branch = br;
      rows.push_back(tokenizer_row(cfg, dualvitok::branch_name(br), t));
    }
  } else if (axis == "input_mode") {
    dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0xab1a7eull);
    train_tokenizer(tok, cfg);
    rows.push_back(lm_row(cfg, "continuous", true, tok));
    rows.push_back(lm_row(cfg, "discrete", false, tok));
  } else {
    throw DomainError("run_ablation: unknown axis '" + axis + "'");
  }
  return rows;
}

std::string ablation_json(const std::string& axis,
                          const std::vector<AblationRow>& rows) {
  json j;
  j["axis"] = axis;
  j["rows"] = json::array();
  for (const auto& r : rows) {
    json row;
    row["variant"] = r.variant;
    row["psnr"] = r.psnr;
    row["ssim"] = r.ssim;
    row["sem_cosine"] = r.sem_cosine;
    row["util_sem"] = r.util_sem;
    row["util_pix"] = r.util_pix;
    row["final_loss"] = r.final_loss;
    row["token_accuracy"] = r.token_accuracy;
    j["rows"].push_back(row);
  }
  return j.dump(2);
}

// ===== reconstruction entry point =====

ReconstructResult reconstruct_image(const dualvitok::DualViTok<double>& tok,
                                    const Tensor<double>& img,
                                    const dualvitok::NoiseSpec* noise,
                                    std::uint64_t seed) {
  if (img.ndim() != 3 || img.dim(2) != 3)
    throw DomainError("reconstruct_image: expected {H,W,3}");
  auto enc = tok.encode(img);
  if (noise != nullptr) {
    Rng rng(seed);
    for (auto& g : enc.sem_indices)
      g = dualvitok::inject_noise(g, *noise, tok.config().k_sem, rng);
    for (auto& g : enc.pix_indices)
      g = dualvitok::inject_noise(g, *noise, tok.config().k_pix, rng);
  }
  Tensor<double> recon = tok.decode(enc.sem_indices, enc.pix_indices);
  ReconstructResult res;
  res.image = recon.reshaped({img.dim(0), img.dim(1), 3});
  res.psnr = psnr(res.image, img);
  res.ssim = ssim(res.image, img,
                  std::min<idx>(7, std::min(img.dim(0), img.dim(1))));
  return res;
}

// ===== token stream files =====

void write_tokens(const std::string& path, const std::vector<idx>& ids) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("tokens: cannot open " + path);
  for (idx id : ids) f << id << '\n';
}

std::vector<idx> read_tokens(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("tokens: cannot open " + path);
  std::vector<idx> ids;
  idx v = 0;
  while (f >> v) ids.push_back(v);
  return ids;
}

}  // namespace illume::harness
