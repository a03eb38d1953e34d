// cctr: generate | train | eval | ablate | align | gradcheck

#include <CLI11.hpp>

#include <iostream>
#include <random>

#include "cctr/commands.hpp"
#include "cctr/error.hpp"

namespace {

using cctr::cli::kExitGradcheck;
using cctr::cli::kExitOk;
using cctr::cli::kExitValidation;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frame-level CTR prediction on synthetic live streams"};
  app.require_subcommand(1);

  cctr::cli::GenerateOptions gen;
  std::string gen_format = "binary";
  std::string gen_config;
  auto* generate = app.add_subcommand("generate", "Generate a synthetic dataset");
  generate->add_option("--config", gen_config, "Generator config JSON (defaults when omitted)");
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--seed", gen.seed, "Dataset seed");
  generate->add_option("--format", gen_format, "jsonl or binary")
      ->check(CLI::IsMember({"jsonl", "binary"}));

  cctr::cli::TrainCommandOptions tr;
  std::uint64_t tr_seed = 0;
  std::string tr_resume;
  std::size_t tr_max_epochs = 0;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", tr.config, "Run config JSON")->required();
  train->add_option("--data", tr.data, "Dataset directory")->required();
  train->add_option("--out", tr.out, "Checkpoint and metrics directory")->required();
  auto* tr_seed_opt = train->add_option("--seed", tr_seed, "Overrides the config seed");
  auto* tr_resume_opt = train->add_option("--resume", tr_resume, "Checkpoint directory to resume from");
  auto* tr_max_opt = train->add_option("--max-epochs", tr_max_epochs, "Stop after this many epochs");

  cctr::cli::EvalOptions ev;
  std::string ev_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", ev.data, "Dataset directory")->required();
  eval->add_option("--split", ev.split, "test or train")->check(CLI::IsMember({"test", "train"}));
  auto* ev_out_opt = eval->add_option("--out", ev_out, "Writes metrics.json and predictions.csv");

  cctr::cli::AblateOptions ab;
  std::uint64_t ab_seed = 0;
  auto* ablate = app.add_subcommand("ablate", "Train the six loss ablation rows");
  ablate->add_option("--config", ab.config, "Base run config JSON")->required();
  ablate->add_option("--data", ab.data, "Dataset directory")->required();
  ablate->add_option("--out", ab.out, "Output directory")->required();
  auto* ab_seed_opt = ablate->add_option("--seed", ab_seed, "Overrides the config seed");

  cctr::cli::AlignOptions al;
  std::string al_ckpt, al_cost = "distance";
  auto* align = app.add_subcommand("align", "DTW alignment of one window");
  auto* al_ckpt_opt = align->add_option("--ckpt", al_ckpt, "Checkpoint (raw features when omitted)");
  align->add_option("--data", al.data, "Dataset directory")->required();
  align->add_option("--sample", al.sample, "Window index within the split")->required();
  align->add_option("--split", al.split, "test or train")->check(CLI::IsMember({"test", "train"}));
  align->add_option("--cost", al_cost, "distance or similarity")
      ->check(CLI::IsMember({"distance", "similarity"}));
  align->add_option("--out", al.out, "Output directory")->required();

  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  auto* gc_seed_opt = gradcheck->add_option("--seed", gc_seed, "Probe seed (random when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*generate) {
      if (!gen_config.empty()) gen.config = gen_config;
      gen.format = cctr::data::parse_format(gen_format);
      const auto manifest = cctr::cli::cmd_generate(gen);
      std::cout << "train " << manifest["train"]["count"] << " test " << manifest["test"]["count"]
                << " -> " << gen.out.string() << '\n';
    } else if (*train) {
      if (*tr_seed_opt) tr.seed = tr_seed;
      if (*tr_resume_opt) tr.resume = tr_resume;
      if (*tr_max_opt) tr.max_epochs = tr_max_epochs;
      cctr::cli::cmd_train(tr, &std::cout);
    } else if (*eval) {
      if (*ev_out_opt) ev.out = ev_out;
      std::cout << cctr::cli::cmd_eval(ev).report.to_json() << '\n';
    } else if (*ablate) {
      if (*ab_seed_opt) ab.seed = ab_seed;
      const auto rows = cctr::cli::cmd_ablate(ab, &std::cerr);
      std::cout << cctr::cli::ablation_csv(rows);
    } else if (*align) {
      if (*al_ckpt_opt) al.ckpt = al_ckpt;
      al.cost = al_cost == "distance" ? cctr::loss::DtwCost::distance
                                      : cctr::loss::DtwCost::similarity;
      const auto a = cctr::cli::cmd_align(al);
      std::cout << "path length " << a.path.size() << " median offset "
                << cctr::cli::median_offset(a) << '\n';
    } else if (*gradcheck) {
      if (!*gc_seed_opt) gc_seed = std::random_device{}();
      return cctr::cli::cmd_gradcheck(gc_seed, std::cout) ? kExitOk : kExitGradcheck;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cctr::cli::exit_code(e);
  }
  return kExitOk;
}
