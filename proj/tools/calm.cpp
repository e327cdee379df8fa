#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calm/experiment.hpp"

using namespace calm;

namespace {

ExperimentSpec load_with_env(const std::string& path) {
    ExperimentSpec spec = load_spec(path);
    apply_env_seed(spec);
    return spec;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"calm: online continual language modelling harness"};
    app.require_subcommand(1);

    std::string spec_path;
    std::string out_dir = "analysis";
    std::string model_name;
    std::string checkpoint;
    std::string prompt;
    std::vector<std::string> traces;
    int jobs = 1;
    bool dry_run = false;
    long last_m = 100;
    long autocorr_m = 100;
    int length = 200;
    double temperature = 1.0;
    std::uint64_t seed = 1;

    CLI::App* gen = app.add_subcommand("gen-stream", "write vocabulary, corpora, and schedules");
    gen->add_option("--spec", spec_path, "experiment spec JSON")->required();

    CLI::App* run = app.add_subcommand("run", "run every model x lambda x seed job");
    run->add_option("--spec", spec_path, "experiment spec JSON")->required();
    run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    run->add_flag("--dry-run", dry_run, "print parameter counts and the job plan only");

    CLI::App* report = app.add_subcommand("report", "rebuild aggregate CSVs from metric files");
    report->add_option("--spec", spec_path, "experiment spec JSON")->required();

    CLI::App* analyze = app.add_subcommand("analyze", "gate heatmap, correlations, dendrogram");
    analyze->add_option("traces", traces, "trace JSONL files")->required();
    analyze->add_option("--out", out_dir, "output directory");
    analyze->add_option("--last-m", last_m, "batches per class profile")
        ->check(CLI::PositiveNumber);
    analyze->add_option("--m", autocorr_m, "autocorrelation window")->check(CLI::PositiveNumber);

    CLI::App* sample = app.add_subcommand("sample", "continue a prompt from a checkpoint");
    sample->add_option("--spec", spec_path, "experiment spec JSON")->required();
    sample->add_option("--model", model_name, "model name from the spec")->required();
    sample->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    sample->add_option("--prompt", prompt, "prompt text")->required();
    sample->add_option("--length", length, "tokens to generate")->check(CLI::PositiveNumber);
    sample->add_option("--temp", temperature, "softmax temperature, 0 = greedy")
        ->check(CLI::NonNegativeNumber);
    sample->add_option("--seed", seed, "sampling seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_stream(load_with_env(spec_path), std::cout);
        if (run->parsed()) {
            RunOptions options;
            options.jobs = jobs;
            options.dry_run = dry_run;
            return cmd_run(load_with_env(spec_path), options, std::cout);
        }
        if (report->parsed()) return cmd_report(load_with_env(spec_path), std::cout);
        if (analyze->parsed()) return cmd_analyze(traces, out_dir, last_m, autocorr_m, std::cout);
        if (sample->parsed()) {
            std::cout << cmd_sample(load_spec(spec_path), model_name, checkpoint, prompt, length,
                                    temperature, seed)
                      << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
