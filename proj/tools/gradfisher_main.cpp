// Experiment driver: run one preset with a config file, a seed, and an
// output directory, emitting CSVs plus summary.json.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gradfisher/config.hpp"
#include "gradfisher/presets.hpp"

int main(int argc, char** argv) {
    CLI::App app{"gradfisher: fishing attacks on federated gradient aggregation"};

    std::string preset;
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    unsigned threads = 0;

    std::string preset_help = "preset to run (";
    for (std::size_t i = 0; i < gradfisher::preset_names().size(); ++i) {
        if (i) preset_help += ", ";
        preset_help += gradfisher::preset_names()[i];
    }
    preset_help += ")";

    app.add_option("preset", preset, preset_help)->required();
    app.add_option("--config", config_path, "JSON config file (flat keys)");
    app.add_option("--seed", seed, "master seed (overrides config)");
    app.add_option("--out", out_dir, "output directory (overrides config)");
    app.add_option("--threads", threads,
                   "worker threads (overrides config and GRADFISHER_THREADS)");

    CLI11_PARSE(app, argc, argv);

    try {
        gradfisher::ExperimentConfig config;
        if (!config_path.empty()) config = gradfisher::parse_config(config_path);
        // precedence: flag > config file > environment > default
        if (app.count("--seed")) config.seed = seed;
        if (app.count("--out")) config.out_dir = out_dir;
        if (app.count("--threads")) {
            config.threads = threads;
        } else if (const char* env = std::getenv("GRADFISHER_THREADS")) {
            const long v = std::strtol(env, nullptr, 10);
            if (v >= 1) config.threads = static_cast<unsigned>(v);
        }

        const int rc = gradfisher::run_preset(preset, config);
        if (rc == 0)
            std::cout << preset << ": ok, artifacts in " << config.out_dir << '\n';
        return rc;
    } catch (const gradfisher::ParamError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const gradfisher::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
