// Command-line front end: one subcommand per pipeline stage.
//
// Exit codes: 0 success, 2 configuration or artifact-schema problem,
// 3 model execution failure, 4 numerical failure, 1 anything else.

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "gpsens/pipeline.hpp"

namespace {

struct Options {
    std::string config;
    std::string output_dir;
    int threads = -1;
};

gpsens::RunConfig load(const Options& opt) {
    gpsens::RunConfig cfg = gpsens::load_config(opt.config);
    if (!opt.output_dir.empty()) cfg.output_dir = opt.output_dir;
    if (opt.threads >= 0) cfg.threads = static_cast<unsigned>(opt.threads);
    return cfg;
}

int dispatch(const std::string& stage, const Options& opt) {
    gpsens::RunConfig cfg = load(opt);
    if (stage == "design") {
        auto design = gpsens::stage_design(cfg);
        std::cout << "design: " << design.total_rows() << " rows -> " << cfg.path("design.csv")
                  << "\n";
    } else if (stage == "evaluate") {
        auto data = gpsens::stage_evaluate(cfg);
        std::cout << "evaluate: " << data.y.size() << " training points -> "
                  << cfg.path("training.csv") << "\n";
    } else if (stage == "fit") {
        auto gp = gpsens::stage_fit(cfg);
        std::cout << "fit: kernel=" << gpsens::to_string(gp.kind())
                  << " log_marginal=" << gpsens::detail::format_double(gp.log_marginal())
                  << " -> " << cfg.path("gp.json") << "\n";
    } else if (stage == "validate") {
        double q2 = gpsens::stage_validate(cfg);
        std::cout << "validate: q2=" << gpsens::detail::format_double(q2) << " -> "
                  << cfg.path("validation.json") << "\n";
    } else if (stage == "analyze") {
        auto result = gpsens::stage_analyze(cfg);
        std::cout << "analyze: " << result.estimates.size() << " indices -> "
                  << cfg.path("sobol_report.json") << "\n";
    } else if (stage == "report") {
        std::cout << gpsens::stage_report(cfg);
    } else {  // run
        gpsens::run_pipeline(cfg);
        std::cout << gpsens::stage_report(cfg);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Variance-based sensitivity analysis through a Gaussian-process metamodel"};
    app.require_subcommand(1);
    Options opt;
    const std::pair<const char*, const char*> stages[] = {
        {"design", "write the pick-freeze design table"},
        {"evaluate", "run the model on the training points"},
        {"fit", "train the metamodel on training.csv"},
        {"validate", "score the metamodel (holdout or leave-one-out)"},
        {"analyze", "estimate Sobol indices and their uncertainty"},
        {"report", "print a summary of an existing analysis"},
        {"run", "all stages in order"},
    };
    for (const auto& [name, description] : stages) {
        auto* sub = app.add_subcommand(name, description);
        sub->add_option("-c,--config", opt.config, "run configuration file")->required();
        sub->add_option("-o,--output-dir", opt.output_dir, "override output_dir");
        sub->add_option("-t,--threads", opt.threads, "override worker thread count");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        return dispatch(stage, opt);
    } catch (const gpsens::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const gpsens::SchemaError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const gpsens::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const gpsens::ModelExecutionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const gpsens::IllConditionedKernel& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const gpsens::FitFailed& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const gpsens::DegenerateVariance& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const gpsens::NumericalDomain& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
