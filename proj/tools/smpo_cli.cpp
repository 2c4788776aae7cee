#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smpo/smpo.hpp"

namespace {

using namespace smpo;

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool has_flag(const std::vector<std::string>& args, const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

/// Pulls `--config FILE` out of the arguments and appends every key=value of
/// FILE as `--key=value`, unless that flag was given on the command line.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw ConfigError("--config needs a file argument");
            path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
    }
    if (path.empty()) return args;
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::vector<std::string> extra;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        std::string key = trim(line.substr(0, eq));
        std::replace(key.begin(), key.end(), '_', '-');
        const std::string flag = "--" + key;
        if (!has_flag(args, flag)) extra.push_back(flag + "=" + trim(line.substr(eq + 1)));
    }
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
}

void add_optimizer_flags(CLI::App* cmd, TrainConfig& cfg) {
    cmd->add_option("--lr", cfg.lr, "Learning rate")->capture_default_str();
    cmd->add_option("--weight-decay", cfg.weight_decay, "Decoupled weight decay")->capture_default_str();
    cmd->add_option("--adam-beta1", cfg.adam_beta1)->capture_default_str();
    cmd->add_option("--adam-beta2", cfg.adam_beta2)->capture_default_str();
    cmd->add_option("--adam-eps", cfg.adam_eps)->capture_default_str();
    cmd->add_option("--warmup-steps", cfg.warmup_steps, "Linear warm-up length")->capture_default_str();
    cmd->add_option("--lr-cosine-decay", cfg.lr_cosine_decay, "Cosine decay to zero after warm-up")
        ->capture_default_str();
    cmd->add_option("--batch-pairs", cfg.batch_pairs, "Items per micro-batch")->capture_default_str();
    cmd->add_option("--grad-accum", cfg.grad_accum, "Micro-batches per optimizer step")->capture_default_str();
    cmd->add_option("--total-steps", cfg.total_steps, "Optimizer steps")->capture_default_str();
    cmd->add_option("--seed", cfg.seed)->capture_default_str();
    cmd->add_option("--workers", cfg.workers, "Worker threads when not strict")->capture_default_str();
    cmd->add_option("--strict", cfg.strict, "Single-threaded, byte-reproducible outputs")->capture_default_str();
    cmd->add_option("--checkpoint-every", cfg.checkpoint_every, "Write <out>.step<N> every N steps (0 = off)")
        ->capture_default_str();
}

struct EnumFlags {
    std::string method;
    std::string schedule;
    std::string activation;
};

void add_model_flags(CLI::App* cmd, TrainConfig& cfg, EnumFlags& names) {
    cmd->add_option("--T", cfg.T, "Diffusion horizon")->capture_default_str();
    cmd->add_option("--schedule", names.schedule, "linear_beta | cosine")->capture_default_str();
    cmd->add_option("--beta-min", cfg.beta_min)->capture_default_str();
    cmd->add_option("--beta-max", cfg.beta_max)->capture_default_str();
    cmd->add_option("--scale-betas", cfg.scale_betas, "Rescale the beta range by 1000/T")->capture_default_str();
    cmd->add_option("--hidden-dim", cfg.hidden_dim)->capture_default_str();
    cmd->add_option("--depth", cfg.depth)->capture_default_str();
    cmd->add_option("--t-embed-dim", cfg.t_embed_dim)->capture_default_str();
    cmd->add_option("--activation", names.activation, "silu | tanh")->capture_default_str();
    cmd->add_option("--cond-dropout", cfg.cond_dropout, "Probability of training on the null condition")
        ->capture_default_str();
}

void add_preference_flags(CLI::App* cmd, TrainConfig& cfg, EnumFlags& names) {
    cmd->add_option("--method", names.method, "sft | dpo | smpo")->capture_default_str();
    cmd->add_option("--beta", cfg.beta, "KL regularization strength")->capture_default_str();
    cmd->add_option("--gamma", cfg.gamma, "Label sensitivity factor")->capture_default_str();
    cmd->add_option("--inv-steps", cfg.inv_steps, "DDIM inversion steps")->capture_default_str();
    cmd->add_option("--inv-guidance", cfg.inv_guidance, "Guidance scale during inversion")->capture_default_str();
    cmd->add_option("--renoise-iters", cfg.renoise_iters, "ReNoise corrections")->capture_default_str();
    cmd->add_option("--detach-inversion", cfg.detach_inversion, "Treat the inverted latent as a constant")
        ->capture_default_str();
    cmd->add_option("--lr-beta-scaling", cfg.lr_beta_scaling, "Multiply lr by 2000/beta")->capture_default_str();
}

void add_config_flag(CLI::App* cmd) {
    // consumed by expand_config before parsing; registered for --help only
    cmd->add_option("--config", "Flat key=value file; command-line flags take precedence");
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path);
    f << text;
}

CheckpointHook periodic_checkpoints(const std::string& out, const NoiseSchedule& sched, std::int64_t total) {
    return [=](std::int64_t step, const DenoiserModel& m, const AdamState& st) {
        Checkpoint ck{m, sched, st, step};
        save_checkpoint(step == total ? out : out + ".step" + std::to_string(step), ck);
    };
}

void require_same_config(const Checkpoint& a, const Checkpoint& b) {
    if (a.hash() != b.hash()) {
        throw ConfigError("checkpoints were built with different architecture/schedule (config hash " + a.hash() +
                          " vs " + b.hash() + ")");
    }
}

std::vector<Vector> task_conditions(const std::string& task, std::size_t cond_dim) {
    auto conds = make_toy_task(toy_kind_from_string(task)).conditions;
    if (conds.front().dim() != cond_dim) throw ConfigError("task conditions do not match the model's cond_dim");
    return conds;
}

int run(int argc, char** argv) {
    CLI::App app{"Smoothed preference optimization for diffusion models on synthetic data", "smpo"};
    app.require_subcommand(1);

    TrainConfig pre_cfg = TrainConfig::pretrain_defaults();
    TrainConfig cfg;
    EnumFlags names{to_string(cfg.method), to_string(pre_cfg.schedule), to_string(pre_cfg.activation)};

    // gen-data
    std::string task = "gmm2d", out, data_path, metrics_path, ref_path, ckpt_path, reward_name = "target_distance";
    std::int64_t n_pairs = 5000;
    std::uint64_t seed = 0;
    auto* gen = app.add_subcommand("gen-data", "Generate an unlabeled toy preference dataset (JSONL)");
    gen->add_option("--task", task, "gmm2d | ring")->capture_default_str();
    gen->add_option("--n-pairs", n_pairs)->capture_default_str();
    gen->add_option("--seed", seed)->capture_default_str();
    gen->add_option("--out", out)->required();
    add_config_flag(gen);

    // label
    double gamma = 10.0;
    auto* label = app.add_subcommand("label", "Score pairs with a reward and attach smoothed labels");
    label->add_option("--data", data_path)->required();
    label->add_option("--out", out)->required();
    label->add_option("--reward", reward_name, "target_distance | axis_projection")->capture_default_str();
    label->add_option("--gamma", gamma)->capture_default_str();
    add_config_flag(label);

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "Train the reference denoiser");
    pretrain->add_option("--data", data_path)->required();
    pretrain->add_option("--out", out, "Checkpoint path")->required();
    pretrain->add_option("--metrics", metrics_path, "Metrics CSV path");
    add_model_flags(pretrain, pre_cfg, names);
    add_optimizer_flags(pretrain, pre_cfg);
    add_config_flag(pretrain);

    // train
    auto* train = app.add_subcommand("train", "Preference fine-tuning against a frozen reference");
    train->add_option("--ref", ref_path, "Reference checkpoint")->required();
    train->add_option("--data", data_path, "Labeled dataset")->required();
    train->add_option("--out", out, "Checkpoint path")->required();
    train->add_option("--metrics", metrics_path, "Metrics CSV path");
    add_preference_flags(train, cfg, names);
    add_optimizer_flags(train, cfg);
    add_config_flag(train);

    // sample
    int n_samples = 1000, steps = 50;
    double guidance = 1.0;
    auto* sample = app.add_subcommand("sample", "Draw DDIM samples (CSV)");
    sample->add_option("--ckpt", ckpt_path)->required();
    sample->add_option("--task", task)->capture_default_str();
    sample->add_option("--n", n_samples)->capture_default_str();
    sample->add_option("--steps", steps)->capture_default_str();
    sample->add_option("--guidance", guidance)->capture_default_str();
    sample->add_option("--seed", seed)->capture_default_str();
    sample->add_option("--out", out)->required();
    add_config_flag(sample);

    // invert
    int t_inv = 0, inv_steps = 9, renoise_iters = 1;
    std::int64_t limit = 100;
    double inv_guidance = 1.0;
    auto* invert = app.add_subcommand("invert", "ReNoise-invert dataset winners and report residuals (CSV)");
    invert->add_option("--ckpt", ckpt_path)->required();
    invert->add_option("--data", data_path)->required();
    invert->add_option("--t", t_inv, "Target step (default T/2)");
    invert->add_option("--inv-steps", inv_steps)->capture_default_str();
    invert->add_option("--inv-guidance", inv_guidance)->capture_default_str();
    invert->add_option("--renoise-iters", renoise_iters)->capture_default_str();
    invert->add_option("--limit", limit, "Pairs to process")->capture_default_str();
    invert->add_option("--out", out)->required();
    add_config_flag(invert);

    // eval
    std::string model_path;
    EvalConfig eval_cfg;
    auto* eval = app.add_subcommand("eval", "Win rate of a model against the reference (JSON)");
    eval->add_option("--model", model_path)->required();
    eval->add_option("--ref", ref_path)->required();
    eval->add_option("--task", task)->capture_default_str();
    eval->add_option("--reward", reward_name)->capture_default_str();
    eval->add_option("--n-prompts", eval_cfg.n_prompts)->capture_default_str();
    eval->add_option("--sample-steps", eval_cfg.sample_steps)->capture_default_str();
    eval->add_option("--guidance", eval_cfg.guidance)->capture_default_str();
    eval->add_option("--seed", eval_cfg.seed)->capture_default_str();
    eval->add_option("--out", out, "Report path (stdout if omitted)");
    add_config_flag(eval);

    // gradcheck
    int configurations = 20;
    double h = 1e-5;
    auto* gc = app.add_subcommand("gradcheck", "Compare tape gradients with central differences");
    gc->add_option("--configs", configurations)->capture_default_str();
    gc->add_option("--fd-step", h, "Central-difference step")->capture_default_str();
    gc->add_option("--seed", seed)->capture_default_str();
    add_config_flag(gc);

    // identity-check
    std::int64_t identity_samples = 10000;
    auto* ident = app.add_subcommand("identity-check", "Sweep the smoothed-loss reduction identity");
    ident->add_option("--samples", identity_samples)->capture_default_str();
    ident->add_option("--seed", seed)->capture_default_str();
    add_config_flag(ident);

    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    if (*gen) {
        save_dataset(out, gen_toy_data(toy_kind_from_string(task), n_pairs, seed));
        return 0;
    }
    if (*label) {
        const auto labeled = label_dataset(load_dataset(data_path), reward_from_string(reward_name), gamma);
        if (labeled.header.reward_stats->degenerate()) {
            std::cerr << "warning: all rewards are equal; every label is 0.5 and the preference loss is inert\n";
        }
        save_dataset(out, labeled);
        return 0;
    }
    if (*pretrain) {
        pre_cfg.schedule = schedule_kind_from_string(names.schedule);
        pre_cfg.activation = activation_from_string(names.activation);
        pre_cfg.validate();
        const auto data = load_dataset(data_path);
        const auto sched = pre_cfg.make_noise_schedule();
        const auto result = pretrain_reference(data, pre_cfg, periodic_checkpoints(out, sched, pre_cfg.total_steps));
        if (!metrics_path.empty()) write_text(metrics_path, metrics_csv(result.metrics));
        if (!result.metrics.empty()) std::cerr << "final loss " << result.metrics.back().loss << "\n";
        return 0;
    }
    if (*train) {
        cfg.method = method_from_string(names.method);
        const auto ref = load_checkpoint(ref_path);
        cfg.T = ref.schedule.T;
        cfg.schedule = ref.schedule.kind;
        cfg.beta_min = ref.schedule.beta_min;
        cfg.beta_max = ref.schedule.beta_max;
        cfg.scale_betas = false;
        cfg.validate();
        const auto data = load_dataset(data_path);
        if (data.pairs.front().x_w.dim() != ref.model.arch().data_dim ||
            data.pairs.front().condition.dim() != ref.model.arch().cond_dim) {
            throw ConfigError("dataset dimensions do not match the reference model");
        }
        const auto result = finetune(ref.model, data, cfg, periodic_checkpoints(out, ref.schedule, cfg.total_steps));
        if (!metrics_path.empty()) write_text(metrics_path, metrics_csv(result.metrics));
        if (!result.metrics.empty()) {
            std::cerr << "final loss " << result.metrics.back().loss << ", mean margin "
                      << result.metrics.back().mean_margin << "\n";
        }
        return 0;
    }
    if (*sample) {
        const auto ck = load_checkpoint(ckpt_path);
        const auto conds = task_conditions(task, ck.model.arch().cond_dim);
        if (n_samples < 1) throw ConfigError("--n must be >= 1");
        SeededRng rng(seed);
        std::string csv = "i";
        for (std::size_t k = 0; k < ck.model.arch().cond_dim; ++k) csv += ",c_" + std::to_string(k);
        for (std::size_t k = 0; k < ck.model.arch().data_dim; ++k) csv += ",x_" + std::to_string(k);
        csv += "\n";
        for (int i = 0; i < n_samples; ++i) {
            const Vector& c = conds[static_cast<std::size_t>(i) % conds.size()];
            const Vector x = ddim_sample(ck.model, gaussian(rng, ck.model.arch().data_dim), c, steps, guidance, ck.schedule);
            csv += std::to_string(i);
            for (double v : c) csv += "," + format_real(v);
            for (double v : x) csv += "," + format_real(v);
            csv += "\n";
        }
        write_text(out, csv);
        return 0;
    }
    if (*invert) {
        const auto ck = load_checkpoint(ckpt_path);
        const auto data = load_dataset(data_path);
        const int t = t_inv > 0 ? t_inv : ck.schedule.T / 2;
        std::string csv = "id,t,inv_steps,residual_before,residual_after,recon_error\n";
        const auto n = std::min<std::size_t>(data.pairs.size(), static_cast<std::size_t>(std::max<std::int64_t>(limit, 0)));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& p = data.pairs[i];
            const auto inv = renoise_invert(ck.model, p.x_w, t, inv_steps, p.condition, inv_guidance, ck.schedule,
                                            renoise_iters);
            const double recon =
                reconstruction_error(ck.model, p.x_w, inv.x_tilde, t, inv_steps, p.condition, inv_guidance, ck.schedule);
            csv += p.id + "," + std::to_string(t) + "," + std::to_string(inv_steps) + "," +
                   format_real(inv.residual_before) + "," + format_real(inv.residual_after) + "," + format_real(recon) +
                   "\n";
        }
        write_text(out, csv);
        return 0;
    }
    if (*eval) {
        const auto model = load_checkpoint(model_path);
        const auto ref = load_checkpoint(ref_path);
        require_same_config(model, ref);
        const auto conds = task_conditions(task, ref.model.arch().cond_dim);
        const auto report = evaluate(model.model, ref.model, reward_from_string(reward_name), conds,
                                     ref.model.arch().data_dim, eval_cfg, ref.schedule);
        const std::string json = eval_report_to_json(report).dump(2) + "\n";
        if (out.empty()) {
            std::cout << json;
        } else {
            write_text(out, json);
        }
        return 0;
    }
    if (*gc) {
        if (configurations < 1) throw ConfigError("--configs must be >= 1");
        bool ok = true;
        for (const auto& r : gradcheck(configurations, seed, h)) {
            // the through-inversion path chains many network calls and is reported for information only
            const bool gated = r.loss != "smpo_loss_through_inversion";
            const bool pass = r.max_rel_error < 1e-4;
            if (gated) ok = ok && pass;
            std::printf("%-28s params=%zu configs=%d max_rel_error=%.3e %s\n", r.loss.c_str(), r.num_params,
                        r.configurations, r.max_rel_error, pass ? "ok" : (gated ? "FAIL" : "high"));
        }
        return ok ? 0 : 1;
    }
    if (*ident) {
        const auto r = identity_sweep(identity_samples, seed);
        const bool pass = r.max_abs_diff < 1e-10;
        std::printf("samples=%lld max_abs_diff=%.3e %s\n", static_cast<long long>(r.samples), r.max_abs_diff,
                    pass ? "ok" : "FAIL");
        return pass ? 0 : 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const smpo::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const smpo::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
