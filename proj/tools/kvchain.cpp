// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

// kvchain: pretrain, gen, train, run, bench and verify from one binary.
// Every command reads an optional JSON config, applies flag overrides and
// writes the resolved config next to its outputs.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "kvchain/kvchain.hpp"

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using namespace kvchain;

// An error tied to a file the user named; the record carries the path.
class PathError : public Error {
public:
    PathError(ErrorCode code, const std::string& message, fs::path path)
        : Error(code, message), m_path(std::move(path)) {}
    const fs::path& path() const noexcept { return m_path; }

private:
    fs::path m_path;
};

int exit_code(ErrorCode c) {
    switch (c) {
    case ErrorCode::kIo: return 2;
    case ErrorCode::kCorrupt: return 3;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kShapeMismatch: return 4;
    case ErrorCode::kPrecondition: return 5;
    case ErrorCode::kNumeric: return 6;
    }
    return 1;
}

void error_record(const std::string& command, const std::string& code, const std::string& message,
                  const std::optional<fs::path>& path = {}) {
    json rec{{"error", code}, {"command", command}, {"message", message}};
    if (path) rec["path"] = path->string();
    std::cerr << rec.dump() << std::endl;
}

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string mode;
    std::string mask;
    std::string precision;
};

const fs::path& existing(const fs::path& p) {
    if (!fs::exists(p)) throw PathError(ErrorCode::kIo, "missing input file " + p.string(), p);
    return p;
}

template <typename V>
V get_or(const json& j, const char* key, V fallback) {
    return j.contains(key) ? j.at(key).get<V>() : fallback;
}

json read_json_file(const fs::path& p) {
    std::ifstream in(existing(p));
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw PathError(ErrorCode::kCorrupt, std::string("config is not valid JSON: ") + e.what(), p);
    }
}

/// File values, then flags on top. Seeds default to 0.
json resolve(const std::string& command, const Flags& f) {
    json cfg = f.config.empty() ? json::object() : read_json_file(f.config);
    KVCHAIN_CHECK(cfg.is_object(), ErrorCode::kInvalidArgument, "config must be a JSON object");
    cfg["command"] = command;
    if (f.seed) cfg["seed"] = *f.seed;
    if (!cfg.contains("seed")) cfg["seed"] = 0;
    if (!f.mode.empty()) cfg["mode"] = f.mode;
    if (!f.mask.empty()) cfg["mask_foreign_prompts"] = f.mask == "on";
    if (!cfg.contains("mask_foreign_prompts")) cfg["mask_foreign_prompts"] = true;
    if (!f.precision.empty()) cfg["precision"] = f.precision;
    if (!cfg.contains("precision")) cfg["precision"] = "f32";
    const std::string prec = cfg["precision"].get<std::string>();
    KVCHAIN_CHECK(prec == "f32" || prec == "f64", ErrorCode::kInvalidArgument, "precision must be f32 or f64");
    if (!f.out.empty()) {
        cfg["out"] = f.out;
    } else if (!cfg.contains("out")) {
        const char* root = std::getenv("KVCHAIN_OUT");
        cfg["out"] = (fs::path(root && *root ? root : "kvchain-out") / command).string();
    }
    return cfg;
}

fs::path prepare_out(const json& cfg) {
    const fs::path out = cfg.at("out").get<std::string>();
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw PathError(ErrorCode::kIo, "cannot create output directory: " + ec.message(), out);
    std::ofstream f(out / "resolved_config.json", std::ios::trunc);
    if (!f) throw PathError(ErrorCode::kIo, "cannot write resolved config", out / "resolved_config.json");
    f << cfg.dump(2) << '\n';
    return out;
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw PathError(ErrorCode::kIo, "cannot write output", p);
    f << j.dump(2) << '\n';
}

ModelConfig model_config(const json& j) {
    ModelConfig c;
    c.d_model = get_or<std::size_t>(j, "d_model", c.d_model);
    c.n_layers = get_or<std::size_t>(j, "n_layers", c.n_layers);
    c.n_heads = get_or<std::size_t>(j, "n_heads", c.n_heads);
    c.head_dim = get_or<std::size_t>(j, "head_dim", c.d_model / c.n_heads);
    c.ffn_dim = get_or<std::size_t>(j, "ffn_dim", c.ffn_dim);
    c.vocab_size = get_or<std::size_t>(j, "vocab_size", c.vocab_size);
    c.max_seq = get_or<std::size_t>(j, "max_seq", c.max_seq);
    c.rope_base = get_or<double>(j, "rope_base", c.rope_base);
    c.norm_eps = get_or<double>(j, "norm_eps", c.norm_eps);
    c.validate();
    return c;
}

json model_config_json(const ModelConfig& c) {
    return {{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"head_dim", c.head_dim},
            {"ffn_dim", c.ffn_dim}, {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}, {"rope_base", c.rope_base},
            {"norm_eps", c.norm_eps}};
}

TrainConfig train_config(const json& cfg, std::ostream* log) {
    TrainConfig tc;
    tc.lr = get_or<double>(cfg, "lr", tc.lr);
    tc.steps = get_or<long>(cfg, "steps", tc.steps);
    tc.batch_size = get_or<std::size_t>(cfg, "batch_size", tc.batch_size);
    tc.warmup = get_or<double>(cfg, "warmup", tc.warmup);
    tc.seed = cfg.at("seed").get<std::uint64_t>();
    tc.n_prompt_tokens = get_or<std::size_t>(cfg, "n_prompt_tokens", tc.n_prompt_tokens);
    tc.max_grad_norm = get_or<double>(cfg, "max_grad_norm", tc.max_grad_norm);
    tc.mask_rule = MaskRule{cfg.at("mask_foreign_prompts").get<bool>()};
    tc.log = log;
    tc.validate();
    return tc;
}

std::ofstream open_log(const fs::path& p) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw PathError(ErrorCode::kIo, "cannot write log", p);
    return f;
}

Dataset load_data(const json& cfg, const char* key) {
    KVCHAIN_CHECK(cfg.contains(key), ErrorCode::kInvalidArgument, "config needs '", key, "'");
    return load_dataset(existing(cfg.at(key).get<std::string>()));
}

template <typename T>
ModelWeights<T> load_base(const json& cfg) {
    KVCHAIN_CHECK(cfg.contains("base"), ErrorCode::kInvalidArgument, "config needs 'base' (model checkpoint)");
    return load_model<T>(existing(cfg.at("base").get<std::string>()));
}

template <typename T>
PromptParams<T> load_prompt_file(const std::string& path) {
    return load_prompt<T>(existing(path));
}

template <typename T>
std::vector<PromptParams<T>> load_prompts(const json& cfg, const char* key) {
    std::vector<PromptParams<T>> out;
    if (!cfg.contains(key)) return out;
    for (const auto& p : cfg.at(key)) out.push_back(load_prompt_file<T>(p.get<std::string>()));
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
int cmd_pretrain(const json& cfg) {
    const fs::path out = prepare_out(cfg);
    const ModelConfig mc = model_config(cfg.value("model", json::object()));
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
    const auto n = get_or<std::size_t>(cfg, "corpus_size", 4000);
    const auto held = get_or<std::size_t>(cfg, "heldout_size", 200);
    auto corpus = gen_pretrain_corpus(get_or<std::uint64_t>(cfg, "corpus_seed", seed), n + held,
                                      get_or<std::size_t>(cfg, "max_block", 10));
    const std::vector<LmSequence> heldout(corpus.end() - static_cast<std::ptrdiff_t>(held), corpus.end());
    corpus.resize(n);
    std::ofstream log = open_log(out / "train_log.jsonl");
    const TrainConfig tc = train_config(cfg, &log);
    const auto r = pretrain_base<T>(mc, corpus, tc);
    save_model(r.weights, out / "base.bin");
    write_json(out / "summary.json", {{"model", model_config_json(mc)},
                                      {"steps", tc.steps},
                                      {"final_loss", r.log.empty() ? 0.0 : r.log.back().loss},
                                      {"heldout_loss", heldout.empty() ? 0.0 : lm_loss(r.weights, heldout)}});
    std::cout << (out / "base.bin").string() << '\n';
    return 0;
}

int cmd_gen(const json& cfg) {
    const fs::path out = prepare_out(cfg);
    const std::string family = get_or<std::string>(cfg, "family", "compress_qa");
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
    const auto n_train = get_or<std::size_t>(cfg, "n_train", 2048);
    const auto n_test = get_or<std::size_t>(cfg, "n_test", 256);
    Dataset all;
    if (family == "compress_qa") {
        all = gen_compress_qa(seed, n_train + n_test, get_or<std::size_t>(cfg, "n_facts", 1),
                              get_or<std::size_t>(cfg, "n_distractors", 6));
    } else if (family == "multi_round") {
        all = gen_multi_round(seed, n_train + n_test, get_or<std::size_t>(cfg, "hops", 2),
                              get_or<std::size_t>(cfg, "n_distractors", 6), get_or<std::uint64_t>(cfg, "table_seed", 0));
    } else {
        detail::fail(ErrorCode::kInvalidArgument, "unknown family '", family, "' (compress_qa | multi_round)");
    }
    Dataset train{all.family, {all.examples.begin(), all.examples.begin() + static_cast<std::ptrdiff_t>(n_train)}};
    Dataset test{all.family, {all.examples.begin() + static_cast<std::ptrdiff_t>(n_train), all.examples.end()}};
    save_dataset(train, out / "train.jsonl");
    save_dataset(test, out / "test.jsonl");
    std::cout << (out / "train.jsonl").string() << '\n' << (out / "test.jsonl").string() << '\n';
    return 0;
}

template <typename T>
int cmd_train(const json& cfg) {
    const fs::path out = prepare_out(cfg);
    const std::string mode = get_or<std::string>(cfg, "mode", "standard");
    const auto base = load_base<T>(cfg);
    Dataset data = load_data(cfg, "train");
    std::ofstream log = open_log(out / "train_log.jsonl");
    TrainConfig tc = train_config(cfg, &log);
    const int target = get_or<int>(cfg, "model_id", 1);
    const auto upstream_owned = load_prompts<T>(cfg, "upstream");
    std::vector<const PromptParams<T>*> upstream;
    for (const auto& p : upstream_owned) upstream.push_back(&p);

    PromptTrainResult<T> r;
    if (mode == "standard") {
        r = train_standard_prompt(base, data, target, tc);
    } else if (mode == "fthss-online") {
        r = train_fthss_online(base, upstream, data, target, tc);
    } else if (mode == "fthss-offline") {
        tc.cache_dir = out / "caches";
        r = train_fthss_offline(base, upstream, data, target, tc);
    } else if (mode == "fthss-multiround") {
        r = train_fthss_multi_round(base, data, get_or<std::vector<int>>(cfg, "models", {0, 1}), tc);
    } else if (mode == "continue") {
        KVCHAIN_CHECK(cfg.contains("standard"), ErrorCode::kInvalidArgument, "continue needs 'standard' prompt path");
        const auto standard = load_prompt_file<T>(cfg.at("standard").get<std::string>());
        const auto n = get_or<std::size_t>(cfg, "n_examples", data.size() / 10);
        data.examples.resize(std::min(n, data.size()));
        r = continue_fthss(base, upstream, standard, data, tc);
    } else {
        detail::fail(ErrorCode::kInvalidArgument, "unknown train mode '", mode,
                     "' (standard | fthss-offline | fthss-online | fthss-multiround | continue)");
    }
    for (const auto& p : r.prompts) {
        const fs::path path = out / ("prompt_" + std::to_string(p.model_id) + ".bin");
        save_prompt(p, base.config, path);
        std::cout << path.string() << '\n';
    }
    return 0;
}

template <typename T>
ChainSpec<T> chain_spec(const json& cfg, const std::vector<PromptParams<T>>& prompts, const Dataset& data) {
    ChainSpec<T> spec;
    spec.mask_rule = MaskRule{cfg.at("mask_foreign_prompts").get<bool>()};
    const auto max_out = get_or<std::size_t>(cfg, "max_output_tokens", 8);
    for (const auto& p : prompts) spec.models.push_back({p.model_id, p, {}, max_out});
    KVCHAIN_CHECK(!spec.models.empty(), ErrorCode::kInvalidArgument, "config needs 'prompts'");
    // Multi-round data: the last model reads what the first one planned.
    const bool multi = data.family == "multi_round";
    std::size_t steps = data.examples.empty() ? spec.models.size() : data.examples.front().steps.size();
    spec.rounds = get_or<std::size_t>(cfg, "rounds", std::max<std::size_t>(1, steps / spec.models.size()));
    const std::string placement = get_or<std::string>(cfg, "placement", multi ? "front" : "first-use");
    KVCHAIN_CHECK(placement == "front" || placement == "first-use", ErrorCode::kInvalidArgument,
                  "placement must be front or first-use");
    spec.placement = placement == "front" ? PromptPlacement::kFront : PromptPlacement::kFirstUse;
    if (get_or<bool>(cfg, "retrieval", multi) && spec.models.size() >= 2) {
        spec.models.back().unique_input = retrieve_after(spec.models.front().model_id);
    }
    return spec;
}

json steps_json(const std::vector<ChainStep>& steps) {
    json a = json::array();
    for (const auto& s : steps) a.push_back({{"model", s.model}, {"input", s.input}, {"output", s.output}});
    return a;
}

template <typename T>
int cmd_run(const json& cfg) {
    const fs::path out = prepare_out(cfg);
    const std::string mode = get_or<std::string>(cfg, "mode", "fthss");
    KVCHAIN_CHECK(mode == "text" || mode == "fthss", ErrorCode::kInvalidArgument, "run mode must be text or fthss");
    const auto base = load_base<T>(cfg);
    const Dataset data = load_data(cfg, "data");
    const auto prompts = load_prompts<T>(cfg, "prompts");
    const ChainSpec<T> spec = chain_spec(cfg, prompts, data);
    std::ofstream lines(out / "outputs.jsonl", std::ios::trunc);
    if (!lines) throw PathError(ErrorCode::kIo, "cannot write outputs", out / "outputs.jsonl");
    std::vector<std::vector<int>> answers, golds;
    std::size_t prefill = 0, peak_caches = 0, peak_bytes = 0;
    for (const auto& ex : data.examples) {
        const ChainRequest req{ex.id, ex.shared, &ex};
        const ChainResult r = mode == "fthss" ? run_chain_fthss(base, spec, req) : run_chain_text(base, spec, req);
        answers.push_back(r.answer());
        golds.push_back(ex.answer);
        prefill += r.trace.total_prefill();
        peak_caches = std::max(peak_caches, r.trace.peak_live_caches);
        peak_bytes = std::max(peak_bytes, r.trace.peak_kv_bytes());
        lines << json{{"id", ex.id},
                      {"answer", r.answer()},
                      {"gold", ex.answer},
                      {"transcript", steps_json(r.transcript)},
                      {"prefill_tokens", r.trace.total_prefill()},
                      {"caches_created", r.trace.caches_created},
                      {"peak_kv_bytes", r.trace.peak_kv_bytes()}}
                     .dump()
              << '\n';
    }
    json summary{{"mode", mode}, {"examples", data.size()}, {"prefill_tokens", prefill},
                 {"peak_live_caches", peak_caches}, {"peak_kv_bytes", peak_bytes}};
    if (!golds.empty()) {
        summary["exact_match"] = eval_exact_match(answers, golds);
        summary["token_f1"] = eval_token_f1(answers, golds);
    }
    write_json(out / "summary.json", summary);
    std::cout << summary.dump() << '\n';
    return 0;
}

template <typename T>
int cmd_bench(const json& cfg) {
    const fs::path out = prepare_out(cfg);
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
    const auto base = load_base<T>(cfg);
    auto prompts = load_prompts<T>(cfg, "prompts");
    const auto n_prompt = get_or<std::size_t>(cfg, "n_prompt_tokens", 10);
    while (prompts.size() < 2) {
        const int id = static_cast<int>(prompts.size());
        prompts.push_back(PromptParams<T>::init(id, n_prompt, base.config.d_model, seed + static_cast<unsigned>(id)));
    }
    LatencySetup<T> setup;
    setup.upstream = prompts[0];
    setup.downstream = prompts[1];
    setup.shared = cfg.contains("data") ? load_data(cfg, "data").examples.at(0).shared
                                        : gen_compress_qa(seed, 1).examples[0].shared;
    setup.intermediate_lengths =
        get_or<std::vector<std::size_t>>(cfg, "intermediate_lengths", {16, 32, 64, 96, 128});
    setup.trials = get_or<std::size_t>(cfg, "trials", 10);
    setup.decode_tokens = get_or<std::size_t>(cfg, "decode_tokens", 4);
    setup.seed = seed;
    const CostReport rep = time_intermediate_lengths(base, setup, MaskRule{cfg.at("mask_foreign_prompts").get<bool>()});
    {
        std::ofstream csv(out / "cost.csv", std::ios::trunc);
        if (!csv) throw PathError(ErrorCode::kIo, "cannot write report", out / "cost.csv");
        csv << report_render(rep);
    }
    std::vector<double> xs, flops, prefill;
    for (std::size_t i = 0; i + 1 < rep.rows.size(); i += 2) {
        xs.push_back(static_cast<double>(rep.rows[i].intermediate_tokens));
        flops.push_back(rep.rows[i].attn_flops - rep.rows[i + 1].attn_flops);
        prefill.push_back(static_cast<double>(rep.rows[i].prefill_tokens - rep.rows[i + 1].prefill_tokens));
    }
    json summary{{"rows", rep.rows.size()}};
    if (xs.size() >= 3) {
        const QuadraticFit f = fit_quadratic(xs, flops);
        summary["flop_savings_fit"] = {{"a", f.a}, {"b", f.b}, {"c", f.c}, {"r2", f.r2}};
    }
    summary["prefill_savings"] = prefill;
    write_json(out / "summary.json", summary);
    std::cout << report_render(rep);
    return 0;
}

template <typename T>
int cmd_verify(const json& cfg) {
    const fs::path out = prepare_out(cfg);
    VerifyOptions opt;
    opt.seed = cfg.at("seed").get<std::uint64_t>();
    opt.mask_foreign_prompts = cfg.at("mask_foreign_prompts").get<bool>();
    opt.scratch = out / "caches";
    bool all = true;
    json suites = json::array();
    for (const SuiteResult& s : run_verify<T>(opt)) {
        all = all && s.passed;
        std::cout << (s.passed ? "PASS " : "FAIL ") << s.name << "  worst=" << s.metric << " limit=" << s.threshold
                  << " cases=" << s.cases << " (" << s.seconds << " s)\n";
        suites.push_back({{"name", s.name}, {"passed", s.passed}, {"metric", s.metric}, {"threshold", s.threshold},
                          {"cases", s.cases}});
    }
    write_json(out / "verify.json", {{"passed", all}, {"suites", suites}});
    return all ? 0 : 1;
}

template <typename T>
int dispatch(const std::string& command, const json& cfg) {
    if (command == "pretrain") return cmd_pretrain<T>(cfg);
    if (command == "gen") return cmd_gen(cfg);
    if (command == "train") return cmd_train<T>(cfg);
    if (command == "run") return cmd_run<T>(cfg);
    if (command == "bench") return cmd_bench<T>(cfg);
    return cmd_verify<T>(cfg);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kvchain: prompt-tuned model chains sharing one KV cache"};
    app.require_subcommand(1, 1);
    Flags flags;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"pretrain", "train a base model on the instruction corpus"},
        {"gen", "write train/test splits of a synthetic task"},
        {"train", "tune prompts (standard | fthss-offline | fthss-online | fthss-multiround | continue)"},
        {"run", "run a chain over a dataset (text | fthss)"},
        {"bench", "cost and latency sweep over intermediate lengths"},
        {"verify", "run the self-check suites"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", flags.config, "JSON config file");
        sub->add_option("--seed", flags.seed, "seed (default 0)");
        sub->add_option("--out", flags.out, "output directory (default $KVCHAIN_OUT/<command>)");
        sub->add_option("--mode", flags.mode, "command mode");
        sub->add_option("--mask-foreign-prompts", flags.mask, "on | off")->check(CLI::IsMember({"on", "off"}));
        sub->add_option("--precision", flags.precision, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}));
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        error_record("", "usage", e.what());
        return 64;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const json cfg = resolve(command, flags);
        return cfg.at("precision") == "f64" ? dispatch<double>(command, cfg) : dispatch<float>(command, cfg);
    } catch (const PathError& e) {
        error_record(command, std::string(to_string(e.code())), e.what(), e.path());
        return exit_code(e.code());
    } catch (const Error& e) {
        error_record(command, std::string(to_string(e.code())), e.what());
        return exit_code(e.code());
    } catch (const json::exception& e) {
        error_record(command, "invalid_argument", std::string("config: ") + e.what());
        return 4;
    } catch (const std::exception& e) {
        error_record(command, "internal", e.what());
        return 1;
    }
}
