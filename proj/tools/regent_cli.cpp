// Command-line driver for the retrieval-augmented agent pipeline.
// Exit codes: 0 success, 2 invalid configuration or arguments, 1 other
// failures (missing artifacts, I/O, internal errors).

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "regent/regent.hpp"

int main(int argc, char** argv) {
    CLI::App app{"retrieval-augmented generalist agent pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    int threads = 1;
    app.add_option("--config", config_path, "experiment config JSON")->required();
    app.add_option("--seed", seed, "run seed mixed into all stage seeds");
    app.add_option("--out", out_dir, "artifact directory");
    app.add_option("--threads", threads, "worker threads for rollouts and distance scans");

    const char* const names[] = {"gen",      "preprocess", "pretrain", "eval",
                                 "finetune", "bound",      "report"};
    const char* const descs[] = {
        "generate demonstration sets and a content manifest",
        "build retrieval-context datasets for the train levels",
        "pretrain the sequence model across train levels",
        "roll out the configured policies on held-out levels",
        "finetune the pretrained model per held-out level",
        "sweep retrieval sizes against the performance bound",
        "aggregate eval and bound results into report.md"};
    for (std::size_t i = 0; i < 7; ++i) app.add_subcommand(names[i], descs[i])->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (threads < 1) throw regent::ParameterError("--threads must be positive");
        regent::worker_threads() = threads;
        const regent::ExperimentConfig cfg = regent::load_config(config_path);

        std::vector<std::string> written;
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "gen") written = regent::cmd_gen(cfg, out_dir, seed);
        else if (cmd == "preprocess") written = regent::cmd_preprocess(cfg, out_dir);
        else if (cmd == "pretrain") written = regent::cmd_pretrain(cfg, out_dir, seed);
        else if (cmd == "eval") written = regent::cmd_eval(cfg, out_dir, seed);
        else if (cmd == "finetune") written = regent::cmd_finetune(cfg, out_dir, seed);
        else if (cmd == "bound") written = regent::cmd_bound(cfg, out_dir, seed);
        else written = regent::cmd_report(cfg, out_dir);

        for (const std::string& path : written) std::cout << path << "\n";
        return 0;
    } catch (const regent::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const regent::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const regent::ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const regent::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
