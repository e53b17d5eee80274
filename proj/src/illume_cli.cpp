#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "illume/checkpoint.hpp"
#include "illume/datapipe.hpp"
#include "illume/harness.hpp"
#include "illume/image.hpp"

using namespace illume;
namespace fs = std::filesystem;

namespace {

Tensor<double> to_double(const Tensor<float>& f) {
  Tensor<double> d(f.dims());
  d.mat() = f.mat().cast<double>();
  return d;
}

Tensor<float> to_float(const Tensor<double>& d) {
  Tensor<float> f(d.dims());
  f.mat() = d.mat().cast<float>();
  return f;
}

void load_tokenizer_into(dualvitok::DualViTok<double>& tok,
                         const harness::RunConfig& cfg) {
  const std::string path = cfg.out_dir + "/tokenizer.ntc";
  if (!fs::exists(path))
    throw IoError("missing tokenizer checkpoint: " + path +
                  " (run 'tok train' first)");
  load_checkpoint(path, tok.params(), cfg.hash());
}

void load_stage_into(unilm::UnifiedLM<double>& lm,
                     const harness::RunConfig& cfg, int stage) {
  const std::string path =
      cfg.out_dir + "/stage" + std::to_string(stage) + ".ntc";
  if (!fs::exists(path))
    throw IoError("missing stage checkpoint: " + path +
                  " (run 'lm train --stage " + std::to_string(stage) +
                  "' first)");
  load_checkpoint(path, lm.params(), cfg.hash());
}

Tensor<double> decode_block(const dualvitok::DualViTok<double>& tok,
                            const seqcodec::ImageTokenBlock& block) {
  Tensor<double> img =
      tok.decode({block.sem_indices}, {block.pix_indices});
  return img.reshaped({img.dim(1), img.dim(2), 3});
}

void emit_block(const harness::RunConfig& cfg,
                const dualvitok::DualViTok<double>* tok,
                const seqcodec::ImageTokenBlock& block,
                const std::string& tokens_out, const std::string& image_out) {
  if (!tokens_out.empty())
    harness::write_tokens(tokens_out,
                          seqcodec::serialize(block, harness::layout_for(cfg)));
  if (!image_out.empty())
    save_png(image_out, to_float(decode_block(*tok, block)));
  std::cout << "image block: sem " << block.sem_h << "x" << block.sem_w
            << ", pix " << block.pix_h << "x" << block.pix_w << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-branch tokenizer, unified LM and diffusion toolkit"};
  app.require_subcommand(1);

  std::string config_path, axis = "quantizer_kind", in_path, out_path;
  std::string tokens_in, tokens_out, image_out, prompt, noise_kind;
  std::string manifest_path, json_out;
  int stage = 1;
  long budget = 0, divisor = 1;
  double alpha = 0.1, beta = 0.1, cfg_scale = 2.0, temperature = 1.0;
  long top_k = 50, sem_h = 4, sem_w = 4;
  std::uint64_t seed = 0;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config json")->required();
  };

  // ----- tok -----
  CLI::App* tok_cmd = app.add_subcommand("tok", "tokenizer protocols");
  tok_cmd->require_subcommand(1);
  CLI::App* tok_train = tok_cmd->add_subcommand("train", "train and checkpoint");
  add_config(tok_train);
  CLI::App* tok_eval = tok_cmd->add_subcommand("eval", "held-out metrics");
  add_config(tok_eval);
  CLI::App* tok_ablate = tok_cmd->add_subcommand("ablate", "one ablation axis");
  add_config(tok_ablate);
  tok_ablate->add_option("--axis", axis, "ablation axis");
  tok_ablate->add_option("--out", json_out, "write rows json here");
  CLI::App* tok_rec = tok_cmd->add_subcommand("reconstruct", "round trip a png");
  add_config(tok_rec);
  tok_rec->add_option("--in", in_path, "source png")->required();
  tok_rec->add_option("--out", out_path, "reconstruction png")->required();
  tok_rec->add_option("--noise", noise_kind, "inject noise: random|zero");
  tok_rec->add_option("--alpha", alpha, "per-token replacement rate");
  tok_rec->add_option("--beta", beta, "per-sample gate probability");
  tok_rec->add_option("--seed", seed, "noise seed");

  // ----- lm -----
  CLI::App* lm_cmd = app.add_subcommand("lm", "unified language model");
  lm_cmd->require_subcommand(1);
  CLI::App* lm_train = lm_cmd->add_subcommand("train", "run a training stage");
  add_config(lm_train);
  lm_train->add_option("--stage", stage, "stage 1, 2 or 3")->required();
  CLI::App* lm_gen = lm_cmd->add_subcommand("generate", "text to image tokens");
  add_config(lm_gen);
  lm_gen->add_option("--stage", stage, "checkpoint stage to load");
  lm_gen->add_option("--prompt", prompt, "text prompt")->required();
  lm_gen->add_option("--sem-h", sem_h, "semantic grid height");
  lm_gen->add_option("--sem-w", sem_w, "semantic grid width");
  lm_gen->add_option("--cfg-scale", cfg_scale, "guidance scale");
  lm_gen->add_option("--temperature", temperature, "sampling temperature");
  lm_gen->add_option("--top-k", top_k, "top-k cutoff");
  lm_gen->add_option("--seed", seed, "sampling seed");
  lm_gen->add_option("--tokens-out", tokens_out, "serialized token stream");
  lm_gen->add_option("--image-out", image_out, "decode through the tokenizer");
  CLI::App* lm_edit = lm_cmd->add_subcommand("edit", "instructed image edit");
  add_config(lm_edit);
  lm_edit->add_option("--stage", stage, "checkpoint stage to load");
  lm_edit->add_option("--in", in_path, "source png")->required();
  lm_edit->add_option("--instruction", prompt, "edit instruction")->required();
  lm_edit->add_option("--cfg-scale", cfg_scale, "guidance scale");
  lm_edit->add_option("--temperature", temperature, "sampling temperature");
  lm_edit->add_option("--top-k", top_k, "top-k cutoff");
  lm_edit->add_option("--seed", seed, "sampling seed");
  lm_edit->add_option("--tokens-out", tokens_out, "serialized token stream");
  lm_edit->add_option("--image-out", image_out, "decode through the tokenizer");

  // ----- diffusion -----
  CLI::App* diff_cmd = app.add_subcommand("diffusion", "upscaling decoder");
  diff_cmd->require_subcommand(1);
  CLI::App* diff_train = diff_cmd->add_subcommand("train", "train and checkpoint");
  add_config(diff_train);
  CLI::App* diff_dec = diff_cmd->add_subcommand("decode", "tokens to 2x image");
  add_config(diff_dec);
  diff_dec->add_option("--tokens", tokens_in, "serialized token stream");
  diff_dec->add_option("--in", in_path, "or: tokenize this png");
  diff_dec->add_option("--out", out_path, "upscaled png")->required();
  diff_dec->add_option("--seed", seed, "sampling seed");

  // ----- data -----
  CLI::App* data_cmd = app.add_subcommand("data", "resolution planning");
  data_cmd->require_subcommand(1);
  CLI::App* data_plan = data_cmd->add_subcommand("plan", "crop/keep decisions");
  data_plan->add_option("--manifest", manifest_path,
                        "lines of: name width height")->required();
  data_plan->add_option("--budget", budget, "anyres pixel budget");
  data_plan->add_option("--divisor", divisor, "target dim divisor");

  // ----- seq -----
  CLI::App* seq_cmd = app.add_subcommand("seq", "token stream utilities");
  seq_cmd->require_subcommand(1);
  CLI::App* seq_dump = seq_cmd->add_subcommand("dump", "png to token stream");
  add_config(seq_dump);
  seq_dump->add_option("--in", in_path, "source png")->required();
  seq_dump->add_option("--out", out_path, "token file")->required();
  CLI::App* seq_check = seq_cmd->add_subcommand("check", "validate a stream");
  add_config(seq_check);
  seq_check->add_option("--in", in_path, "token file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (tok_train->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      fs::create_directories(cfg.out_dir);
      dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0x70c0deull);
      auto recs = harness::train_tokenizer(
          tok, cfg, cfg.out_dir + "/tokenizer_metrics.jsonl");
      save_checkpoint(cfg.out_dir + "/tokenizer.ntc", tok.params(), cfg.hash());
      std::cout << recs.back().to_json() << "\n"
                << "saved " << cfg.out_dir << "/tokenizer.ntc\n";
    } else if (tok_eval->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0x70c0deull);
      load_tokenizer_into(tok, cfg);
      harness::EvalSummary es = harness::eval_tokenizer(
          tok, harness::eval_images(cfg, cfg.data.img, cfg.data.img));
      nlohmann::json j = {{"psnr", es.psnr},
                          {"ssim", es.ssim},
                          {"sem_cosine", es.sem_cosine},
                          {"util_sem", es.util_sem},
                          {"util_pix", es.util_pix}};
      std::cout << j.dump(2) << "\n";
    } else if (tok_ablate->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      auto rows = harness::run_ablation(cfg, axis);
      std::string body = harness::ablation_json(axis, rows);
      if (json_out.empty()) {
        std::cout << body << "\n";
      } else {
        std::ofstream f(json_out, std::ios::trunc);
        if (!f) throw IoError("cannot open " + json_out);
        f << body << "\n";
        std::cout << "wrote " << json_out << "\n";
      }
    } else if (tok_rec->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0x70c0deull);
      load_tokenizer_into(tok, cfg);
      Tensor<double> img = to_double(load_png(in_path));
      dualvitok::NoiseSpec spec;
      bool noisy = !noise_kind.empty();
      if (noisy)
        spec = {dualvitok::noise_kind_from(noise_kind), alpha, beta};
      auto res =
          harness::reconstruct_image(tok, img, noisy ? &spec : nullptr, seed);
      save_png(out_path, to_float(res.image));
      std::cout << "psnr " << res.psnr << " ssim " << res.ssim << "\n";
    } else if (lm_train->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      harness::run_stage(cfg, stage);
      std::cout << "saved " << cfg.out_dir << "/stage" << stage << ".ntc\n";
    } else if (lm_gen->parsed() || lm_edit->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      unilm::UnifiedLM<double> lm(harness::lm_config(cfg),
                                  cfg.seed ^ 0x1a0001ull);
      load_stage_into(lm, cfg, stage);
      dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0x70c0deull);
      const bool need_tok = lm_edit->parsed() || !image_out.empty();
      if (need_tok) load_tokenizer_into(tok, cfg);
      unilm::GenerationParams p;
      p.cfg_scale = cfg_scale;
      p.temperature = temperature;
      p.top_k = top_k;
      p.seed = seed;
      std::vector<idx> words =
          toydata::instruction_ids(prompt, cfg.lm.text_vocab);
      seqcodec::ImageTokenBlock block;
      if (lm_gen->parsed()) {
        p.sem_h = sem_h;
        p.sem_w = sem_w;
        block = lm.generate_image(words, p);
      } else {
        harness::TokenizedImage ti =
            harness::tokenize_image(tok, to_double(load_png(in_path)));
        block = lm.edit_image(ti.block, ti.sem_feats, ti.pix_feats, words, p);
      }
      emit_block(cfg, need_tok ? &tok : nullptr, block, tokens_out, image_out);
    } else if (diff_train->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0x70c0deull);
      load_tokenizer_into(tok, cfg);
      diffusion::DiffusionDecoder<double> dec(cfg.diff, cfg.tok,
                                              cfg.seed ^ 0xd1f0ull);
      auto recs = harness::train_diffusion(
          dec, tok, cfg, cfg.cond_mask,
          cfg.out_dir + "/diffusion_metrics.jsonl");
      save_checkpoint(cfg.out_dir + "/diffusion.ntc", dec.params(), cfg.hash());
      std::cout << recs.back().to_json() << "\n"
                << "saved " << cfg.out_dir << "/diffusion.ntc\n";
    } else if (diff_dec->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      if (tokens_in.empty() == in_path.empty())
        throw DomainError("decode needs exactly one of --tokens or --in");
      dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0x70c0deull);
      load_tokenizer_into(tok, cfg);
      diffusion::DiffusionDecoder<double> dec(cfg.diff, cfg.tok,
                                              cfg.seed ^ 0xd1f0ull);
      const std::string ck = cfg.out_dir + "/diffusion.ntc";
      if (!fs::exists(ck))
        throw IoError("missing diffusion checkpoint: " + ck +
                      " (run 'diffusion train' first)");
      load_checkpoint(ck, dec.params(), cfg.hash());
      seqcodec::ImageTokenBlock block;
      if (!tokens_in.empty()) {
        auto res = seqcodec::parse(harness::read_tokens(tokens_in),
                                   harness::layout_for(cfg));
        if (!res.ok())
          throw DomainError("token stream invalid at position " +
                            std::to_string(res.error->position) + ": " +
                            res.error->message);
        block = *res.block;
      } else {
        block =
            harness::tokenize_image(tok, to_double(load_png(in_path))).block;
      }
      Tensor<double> up =
          dec.sample(tok, block.sem_indices, block.pix_indices, seed);
      save_png(out_path, to_float(up.reshaped({up.dim(1), up.dim(2), 3})));
      std::cout << "wrote " << out_path << " (" << up.dim(1) << "x"
                << up.dim(2) << ")\n";
    } else if (data_plan->parsed()) {
      std::ifstream f(manifest_path);
      if (!f) throw IoError("cannot open " + manifest_path);
      std::string name;
      idx w = 0, h = 0;
      while (f >> name >> w >> h) {
        datapipe::CropPlan plan = datapipe::match_ratio(w, h);
        const bool keep = datapipe::integrity_keep(plan);
        std::cout << name << " " << w << "x" << h << " -> " << plan.ratio.num
                  << ":" << plan.ratio.den << " retained " << plan.retained
                  << (keep ? " keep" : " drop");
        if (keep && budget > 0) {
          datapipe::StagePlan sp;
          sp.mode = datapipe::ResMode::anyres;
          sp.pixel_budget = budget;
          sp.divisor = divisor;
          auto hw = datapipe::stage_resolution(sp, w, h);
          std::cout << " target " << hw.first << "x" << hw.second;
        }
        std::cout << "\n";
      }
    } else if (seq_dump->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      dualvitok::DualViTok<double> tok(cfg.tok, cfg.seed ^ 0x70c0deull);
      load_tokenizer_into(tok, cfg);
      harness::TokenizedImage ti =
          harness::tokenize_image(tok, to_double(load_png(in_path)));
      auto ids = seqcodec::serialize(ti.block, harness::layout_for(cfg));
      harness::write_tokens(out_path, ids);
      std::cout << "wrote " << ids.size() << " tokens to " << out_path << "\n";
    } else if (seq_check->parsed()) {
      harness::RunConfig cfg = harness::load_run_config(config_path);
      auto ids = harness::read_tokens(in_path);
      auto res = seqcodec::parse(ids, harness::layout_for(cfg));
      if (!res.ok()) {
        std::cout << "invalid: " << seqcodec::parse_error_name(res.error->kind)
                  << " at position " << res.error->position << ": "
                  << res.error->message << "\n";
        return 1;
      }
      std::cout << "ok: sem " << res.block->sem_h << "x" << res.block->sem_w
                << ", pix " << res.block->pix_h << "x" << res.block->pix_w
                << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
