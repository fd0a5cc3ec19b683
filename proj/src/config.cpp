#include "pretune/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace pretune {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

double parse_double(const std::string& key, const std::string& tok) {
  try {
    size_t pos = 0;
    const double v = std::stod(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad number '" + tok + "'");
  }
}

int64_t parse_int(const std::string& key, const std::string& tok) {
  try {
    size_t pos = 0;
    const long long v = std::stoll(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad integer '" + tok + "'");
  }
}

uint64_t parse_uint(const std::string& key, const std::string& tok) {
  try {
    size_t pos = 0;
    const unsigned long long v = std::stoull(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad integer '" + tok + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& tok) {
  if (tok == "true" || tok == "1") return true;
  if (tok == "false" || tok == "0") return false;
  throw ConfigError("config key '" + key + "': bad boolean '" + tok + "'");
}

using Tokens = std::vector<std::string>;

void expect_count(const std::string& key, const Tokens& toks, size_t n) {
  if (toks.size() != n) {
    throw ConfigError("config key '" + key + "': expected " + std::to_string(n) + " value(s), got " +
                      std::to_string(toks.size()));
  }
}

struct KeyHandler {
  std::string key;
  std::function<void(ExperimentConfig&, const Tokens&)> parse;
  std::function<std::string(const ExperimentConfig&)> emit;
};

std::string join_dims(const Dims& d) {
  return std::to_string(d.d) + " " + std::to_string(d.h) + " " + std::to_string(d.w);
}

Dims parse_dims(const std::string& key, const Tokens& t) {
  expect_count(key, t, 3);
  return {parse_int(key, t[0]), parse_int(key, t[1]), parse_int(key, t[2])};
}

const std::vector<KeyHandler>& schema() {
  static const std::vector<KeyHandler> handlers = [] {
    std::vector<KeyHandler> h;
    auto add = [&h](std::string key, auto parse, auto emit) {
      h.push_back({std::move(key), parse, emit});
    };

    add("seed",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("seed", t, 1); c.seed = parse_uint("seed", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.seed); });
    add("out_dir",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("out_dir", t, 1); c.out_dir = t[0]; },
        [](const ExperimentConfig& c) { return c.out_dir.empty() ? "-" : c.out_dir; });
    add("data.manifest",
        [](ExperimentConfig& c, const Tokens& t) {
          expect_count("data.manifest", t, 1);
          c.data_manifest = t[0] == "-" ? "" : t[0];
        },
        [](const ExperimentConfig& c) { return c.data_manifest.empty() ? "-" : c.data_manifest; });
    add("data.synthetic.subjects",
        [](ExperimentConfig& c, const Tokens& t) {
          expect_count("data.synthetic.subjects", t, 1);
          c.synth_subjects = parse_int("data.synthetic.subjects", t[0]);
        },
        [](const ExperimentConfig& c) { return std::to_string(c.synth_subjects); });
    add("data.synthetic.dims",
        [](ExperimentConfig& c, const Tokens& t) { c.synth.dims = parse_dims("data.synthetic.dims", t); },
        [](const ExperimentConfig& c) { return join_dims(c.synth.dims); });
    add("data.synthetic.class_mix",
        [](ExperimentConfig& c, const Tokens& t) {
          expect_count("data.synthetic.class_mix", t, 3);
          for (int i = 0; i < 3; ++i) c.synth.class_mix[i] = parse_double("data.synthetic.class_mix", t[i]);
        },
        [](const ExperimentConfig& c) {
          return fmt_double(c.synth.class_mix[0]) + " " + fmt_double(c.synth.class_mix[1]) + " " +
                 fmt_double(c.synth.class_mix[2]);
        });
    add("data.synthetic.noise_level",
        [](ExperimentConfig& c, const Tokens& t) {
          expect_count("data.synthetic.noise_level", t, 1);
          c.synth.noise_level = parse_double("data.synthetic.noise_level", t[0]);
        },
        [](const ExperimentConfig& c) { return fmt_double(c.synth.noise_level); });
    add("data.split.fractions",
        [](ExperimentConfig& c, const Tokens& t) {
          expect_count("data.split.fractions", t, 3);
          for (int i = 0; i < 3; ++i) c.split_fractions[i] = parse_double("data.split.fractions", t[i]);
        },
        [](const ExperimentConfig& c) {
          return fmt_double(c.split_fractions[0]) + " " + fmt_double(c.split_fractions[1]) + " " +
                 fmt_double(c.split_fractions[2]);
        });

    add("pretrain.strategies",
        [](ExperimentConfig& c, const Tokens& t) {
          if (t.empty()) throw ConfigError("config key 'pretrain.strategies': empty list");
          c.pretrain_strategies.clear();
          for (const auto& tok : t) c.pretrain_strategies.push_back(pretrain_strategy_from_string(tok));
        },
        [](const ExperimentConfig& c) {
          std::string s;
          for (const auto& st : c.pretrain_strategies) {
            if (!s.empty()) s += ' ';
            s += to_string(st);
          }
          return s;
        });
    add("pretrain.epochs",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.epochs", t, 1); c.pretrain.epochs = parse_int("pretrain.epochs", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.epochs); });
    add("pretrain.lr_start",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.lr_start", t, 1); c.pretrain.lr_start = parse_double("pretrain.lr_start", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.pretrain.lr_start); });
    add("pretrain.lr_decay_factor",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.lr_decay_factor", t, 1); c.pretrain.lr_decay_factor = parse_double("pretrain.lr_decay_factor", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.pretrain.lr_decay_factor); });
    add("pretrain.lr_decay_epoch",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.lr_decay_epoch", t, 1); c.pretrain.lr_decay_epoch = parse_int("pretrain.lr_decay_epoch", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.resolved_decay_epoch()); });
    add("pretrain.weight_decay",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.weight_decay", t, 1); c.pretrain.weight_decay = parse_double("pretrain.weight_decay", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.pretrain.weight_decay); });
    add("pretrain.batch_size",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.batch_size", t, 1); c.pretrain.batch_size = parse_int("pretrain.batch_size", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.batch_size); });
    add("pretrain.contrastive_batch_size",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.contrastive_batch_size", t, 1); c.pretrain.contrastive_batch_size = parse_int("pretrain.contrastive_batch_size", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.contrastive_batch_size); });
    add("pretrain.adversarial_period",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.adversarial_period", t, 1); c.pretrain.adversarial_period = parse_int("pretrain.adversarial_period", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.adversarial_period); });
    add("pretrain.temperature",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.temperature", t, 1); c.pretrain.temperature = parse_double("pretrain.temperature", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.pretrain.temperature); });
    add("pretrain.projection_dim",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.projection_dim", t, 1); c.pretrain.projection_dim = parse_int("pretrain.projection_dim", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.projection_dim); });
    add("pretrain.patches_per_subject",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.patches_per_subject", t, 1); c.pretrain.patches_per_subject = parse_int("pretrain.patches_per_subject", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.patches_per_subject); });
    add("pretrain.ssim_window",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.ssim_window", t, 1); c.pretrain.ssim_window = parse_int("pretrain.ssim_window", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.ssim_window); });
    add("pretrain.val_interval",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("pretrain.val_interval", t, 1); c.pretrain.val_interval = parse_int("pretrain.val_interval", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.val_interval); });

    add("diffusion.train_steps",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("diffusion.train_steps", t, 1); c.pretrain.diffusion_train_steps = parse_int("diffusion.train_steps", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.diffusion_train_steps); });
    add("diffusion.beta_start",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("diffusion.beta_start", t, 1); c.pretrain.beta_start = parse_double("diffusion.beta_start", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.pretrain.beta_start); });
    add("diffusion.beta_end",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("diffusion.beta_end", t, 1); c.pretrain.beta_end = parse_double("diffusion.beta_end", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.pretrain.beta_end); });
    add("diffusion.inference_steps",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("diffusion.inference_steps", t, 1); c.pretrain.inference_steps = parse_int("diffusion.inference_steps", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.pretrain.inference_steps); });

    add("finetune.strategies",
        [](ExperimentConfig& c, const Tokens& t) {
          if (t.empty()) throw ConfigError("config key 'finetune.strategies': empty list");
          c.tune_strategies.clear();
          for (const auto& tok : t) c.tune_strategies.push_back(tune_kind_from_string(tok));
        },
        [](const ExperimentConfig& c) {
          std::string s;
          for (const auto& st : c.tune_strategies) {
            if (!s.empty()) s += ' ';
            s += to_string(st);
          }
          return s;
        });
    add("finetune.epochs",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.epochs", t, 1); c.finetune.epochs = parse_int("finetune.epochs", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.finetune.epochs); });
    add("finetune.lr_start",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.lr_start", t, 1); c.finetune.lr_start = parse_double("finetune.lr_start", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.finetune.lr_start); });
    add("finetune.lr_decay_factor",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.lr_decay_factor", t, 1); c.finetune.lr_decay_factor = parse_double("finetune.lr_decay_factor", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.finetune.lr_decay_factor); });
    add("finetune.lr_decay_epoch",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.lr_decay_epoch", t, 1); c.finetune.lr_decay_epoch = parse_int("finetune.lr_decay_epoch", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.finetune.resolved_decay_epoch()); });
    add("finetune.weight_decay",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.weight_decay", t, 1); c.finetune.weight_decay = parse_double("finetune.weight_decay", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.finetune.weight_decay); });
    add("finetune.l1",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.l1", t, 1); c.finetune.weights.l1 = parse_double("finetune.l1", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.finetune.weights.l1); });
    add("finetune.l2",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.l2", t, 1); c.finetune.weights.l2 = parse_double("finetune.l2", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.finetune.weights.l2); });
    add("finetune.batch_size",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.batch_size", t, 1); c.finetune.batch_size = parse_int("finetune.batch_size", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.finetune.batch_size); });
    add("finetune.patches_per_subject",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.patches_per_subject", t, 1); c.finetune.patches_per_subject = parse_int("finetune.patches_per_subject", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.finetune.patches_per_subject); });
    add("finetune.val_interval",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("finetune.val_interval", t, 1); c.finetune.val_interval = parse_int("finetune.val_interval", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.finetune.val_interval); });

    add("tuning.top_fraction",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("tuning.top_fraction", t, 1); c.tuning.top_fraction = parse_double("tuning.top_fraction", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.tuning.top_fraction); });
    add("tuning.lora_rank",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("tuning.lora_rank", t, 1); c.tuning.lora_rank = parse_int("tuning.lora_rank", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.tuning.lora_rank); });
    add("tuning.lora_alpha",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("tuning.lora_alpha", t, 1); c.tuning.lora_alpha = parse_double("tuning.lora_alpha", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.tuning.lora_alpha); });

    add("model.feature_sizes",
        [](ExperimentConfig& c, const Tokens& t) {
          if (t.empty()) throw ConfigError("config key 'model.feature_sizes': empty list");
          c.feature_sizes.clear();
          for (const auto& tok : t) c.feature_sizes.push_back(parse_int("model.feature_sizes", tok));
        },
        [](const ExperimentConfig& c) {
          std::string s;
          for (int64_t f : c.feature_sizes) {
            if (!s.empty()) s += ' ';
            s += std::to_string(f);
          }
          return s;
        });
    add("model.input_patch",
        [](ExperimentConfig& c, const Tokens& t) { c.encdec.input_patch = parse_dims("model.input_patch", t); },
        [](const ExperimentConfig& c) { return join_dims(c.encdec.input_patch); });
    add("model.window",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("model.window", t, 1); c.encdec.window = parse_int("model.window", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.encdec.window); });
    add("model.depths",
        [](ExperimentConfig& c, const Tokens& t) {
          expect_count("model.depths", t, 3);
          for (int i = 0; i < 3; ++i) c.encdec.depths[i] = parse_int("model.depths", t[i]);
        },
        [](const ExperimentConfig& c) {
          return std::to_string(c.encdec.depths[0]) + " " + std::to_string(c.encdec.depths[1]) +
                 " " + std::to_string(c.encdec.depths[2]);
        });
    add("model.mlp_ratio",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("model.mlp_ratio", t, 1); c.encdec.mlp_ratio = parse_double("model.mlp_ratio", t[0]); },
        [](const ExperimentConfig& c) { return fmt_double(c.encdec.mlp_ratio); });

    add("ddunet.channels",
        [](ExperimentConfig& c, const Tokens& t) {
          if (t.empty()) throw ConfigError("config key 'ddunet.channels': empty list");
          c.ddunet.channels.clear();
          for (const auto& tok : t) c.ddunet.channels.push_back(parse_int("ddunet.channels", tok));
          c.ddunet.levels = static_cast<int64_t>(c.ddunet.channels.size());
        },
        [](const ExperimentConfig& c) {
          std::string s;
          for (int64_t v : c.ddunet.channels) {
            if (!s.empty()) s += ' ';
            s += std::to_string(v);
          }
          return s;
        });
    add("ddunet.attention_levels",
        [](ExperimentConfig& c, const Tokens& t) {
          c.ddunet.attention_levels.clear();
          for (const auto& tok : t) c.ddunet.attention_levels.push_back(parse_bool("ddunet.attention_levels", tok));
        },
        [](const ExperimentConfig& c) {
          std::string s;
          for (bool b : c.ddunet.attention_levels) {
            if (!s.empty()) s += ' ';
            s += b ? "1" : "0";
          }
          return s;
        });
    add("ddunet.attention_heads",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("ddunet.attention_heads", t, 1); c.ddunet.attention_heads = parse_int("ddunet.attention_heads", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.ddunet.attention_heads); });
    add("ddunet.residual_blocks",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("ddunet.residual_blocks", t, 1); c.ddunet.residual_blocks_per_level = parse_int("ddunet.residual_blocks", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.ddunet.residual_blocks_per_level); });
    add("ddunet.cross_attention_dim",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("ddunet.cross_attention_dim", t, 1); c.ddunet.cross_attention_dim = parse_int("ddunet.cross_attention_dim", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.ddunet.cross_attention_dim); });
    add("ddunet.input_patch",
        [](ExperimentConfig& c, const Tokens& t) { c.ddunet.input_patch = parse_dims("ddunet.input_patch", t); },
        [](const ExperimentConfig& c) { return join_dims(c.ddunet.input_patch); });

    add("disc.base_width",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("disc.base_width", t, 1); c.disc.base_width = parse_int("disc.base_width", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.disc.base_width); });
    add("disc.blocks",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("disc.blocks", t, 1); c.disc.blocks = parse_int("disc.blocks", t[0]); },
        [](const ExperimentConfig& c) { return std::to_string(c.disc.blocks); });

    add("eval.linear_probe",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("eval.linear_probe", t, 1); c.linear_probe = parse_bool("eval.linear_probe", t[0]); },
        [](const ExperimentConfig& c) { return c.linear_probe ? std::string("true") : std::string("false"); });
    add("grid.parallel_cells",
        [](ExperimentConfig& c, const Tokens& t) { expect_count("grid.parallel_cells", t, 1); c.parallel_cells = parse_bool("grid.parallel_cells", t[0]); },
        [](const ExperimentConfig& c) { return c.parallel_cells ? std::string("true") : std::string("false"); });
    return h;
  }();
  return handlers;
}

}  // namespace

std::string ExperimentConfig::resolved_out_dir() const {
  if (!out_dir.empty()) return out_dir;
  if (const char* env = std::getenv("PRETUNE_OUT")) {
    if (*env) return env;
  }
  return "runs";
}

void ExperimentConfig::validate() const {
  synth.validate();
  if (synth_subjects < 3 && data_manifest.empty()) {
    throw ConfigError("config: synthetic cohort needs at least 3 subjects");
  }
  double sum = 0;
  for (double f : split_fractions) {
    if (f <= 0) throw ConfigError("config: split fractions must be positive");
    sum += f;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("config: split fractions must sum to 1");
  if (pretrain_strategies.empty()) throw ConfigError("config: pretrain strategy grid is empty");
  if (tune_strategies.empty()) throw ConfigError("config: tuning strategy grid is empty");
  if (feature_sizes.empty()) throw ConfigError("config: feature size list is empty");
  pretrain.validate();
  finetune.validate();
  tuning.validate();
  for (int64_t f : feature_sizes) {
    EncoderDecoderConfig probe = encdec;
    probe.feature_size = f;
    probe.validate();
  }
  ddunet.validate();
  disc.validate();
}

ExperimentConfig ExperimentConfig::desk_profile() {
  ExperimentConfig c;
  c.synth.dims = {32, 32, 32};
  c.synth_subjects = 30;
  c.feature_sizes = {6};
  c.encdec = EncoderDecoderConfig::desk_profile();
  c.ddunet = DiffusionUNetConfig::desk_profile();
  c.disc = DiscriminatorConfig::desk_profile();
  c.pretrain.epochs = 3;
  c.pretrain.batch_size = 4;
  c.pretrain.contrastive_batch_size = 4;
  c.pretrain.patches_per_subject = 2;
  c.pretrain.diffusion_train_steps = 100;
  c.finetune.epochs = 3;
  c.finetune.batch_size = 4;
  c.finetune.patches_per_subject = 2;
  return c;
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);

    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      const auto b2 = s.find_first_not_of(" \t");
      const auto e2 = s.find_last_not_of(" \t");
      s = b2 == std::string::npos ? "" : s.substr(b2, e2 - b2 + 1);
    };
    trim(key);
    trim(value);

    const KeyHandler* handler = nullptr;
    for (const auto& h : schema()) {
      if (h.key == key) {
        handler = &h;
        break;
      }
    }
    if (!handler) {
      throw ConfigError("unknown config key '" + key + "' at line " + std::to_string(line_no));
    }
    if (!seen.insert(key).second) {
      throw ConfigError("duplicate config key '" + key + "' at line " + std::to_string(line_no));
    }
    Tokens toks;
    std::istringstream vs(value);
    std::string tok;
    while (vs >> tok) toks.push_back(tok);
    handler->parse(cfg, toks);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string emit_config(const ExperimentConfig& cfg) {
  std::string out = "# pretune experiment configuration\n";
  for (const auto& h : schema()) {
    out += h.key;
    out += " = ";
    out += h.emit(cfg);
    out += '\n';
  }
  return out;
}

void write_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write config: " + path);
  f << emit_config(cfg);
}

std::string config_digest(const ExperimentConfig& cfg) { return hex64(fnv1a64(emit_config(cfg))); }

}  // namespace pretune
