#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "trojanlens/cli_report.hpp"

namespace tl = trojanlens;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string zoo = "zoo";
  std::string out;
  std::optional<std::size_t> benign, trojan;
  std::optional<double> majority_ratio, large_attention, min_sentences_ratio;
  std::optional<double> flip_threshold, delta;
  std::string method;
};

tl::RunConfig resolve(const Flags& f) {
  tl::RunConfig r = f.config.empty() ? tl::RunConfig{} : tl::load_run_config(f.config);
  if (f.seed) r.seed = *f.seed;
  r.zoo.seed = r.seed;
  if (f.benign) r.zoo.n_benign = *f.benign;
  if (f.trojan) r.zoo.n_trojan = *f.trojan;
  if (f.majority_ratio) r.criteria.majority_ratio = *f.majority_ratio;
  if (f.large_attention) r.criteria.large_attention = *f.large_attention;
  if (f.min_sentences_ratio) r.criteria.min_sentences_ratio = *f.min_sentences_ratio;
  if (f.flip_threshold) r.detector.flip_threshold = *f.flip_threshold;
  if (f.delta) r.differing_delta = *f.delta;
  if (!f.method.empty()) r.detector.method = f.method;
  r.validate();
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train benign/trojan transformer zoos, analyse their attention and run trojan detectors."};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub, bool needs_zoo) {
    sub->add_option("--config", f.config, "Run configuration (JSON); flags override it")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "Master seed");
    sub->add_option("--majority-ratio", f.majority_ratio, "Fraction of tokens that must target the positions");
    sub->add_option("--large-attention", f.large_attention, "Minimum row maximum");
    sub->add_option("--min-sentences-ratio", f.min_sentences_ratio, "Fraction of sentences a head must qualify on");
    if (needs_zoo) sub->add_option("--zoo", f.zoo, "Zoo directory")->check(CLI::ExistingDirectory);
  };

  CLI::App* gen = app.add_subcommand("generate-zoo", "Train the benign and trojan model population");
  common(gen, false);
  gen->add_option("--out,--zoo", f.zoo, "Zoo directory to create");
  gen->add_option("--benign", f.benign, "Number of benign models");
  gen->add_option("--trojan", f.trojan, "Number of trojan models");

  CLI::App* analyze = app.add_subcommand("analyze", "Head maps, max-attention distributions and differing heads");
  common(analyze, true);
  analyze->add_option("--out", f.out, "Output directory")->default_str("run");
  analyze->add_option("--delta", f.delta, "Differing-head margin");

  CLI::App* characterize = app.add_subcommand("characterize", "Trigger/semantic/specific heads and population statistics");
  common(characterize, true);
  characterize->add_option("--out", f.out, "Output directory")->default_str("run");

  CLI::App* detect = app.add_subcommand("detect", "Run a trojan detector over the zoo");
  common(detect, true);
  detect->add_option("--method", f.method, "Detector")->required()->check(CLI::IsMember({"naive", "enumerate", "reverse"}));
  detect->add_option("--out", f.out, "Output directory or .json file")->default_str("run");
  detect->add_option("--flip-threshold", f.flip_threshold, "Flip ratio that marks a model as trojan");

  CLI::App* report = app.add_subcommand("report", "Summarise a run directory and emit plot data");
  common(report, false);
  report->add_option("--out", f.out, "Run directory")->default_str("run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (f.out.empty()) f.out = "run";

  try {
    const tl::RunConfig r = resolve(f);
    if (*gen) {
      const tl::ZooManifest m = tl::cmd_generate_zoo(r, f.zoo, [](const tl::ZooEntry& e) {
        std::cerr << e.model_id << (e.failed ? " FAILED: " + e.failure : " ok") << "\n";
      });
      std::cout << "wrote " << m.entries.size() << " entries to " << f.zoo << "\n";
    } else if (*report) {
      std::cout << tl::cmd_report(r, f.out);
    } else {
      const tl::Zoo zoo = tl::load_zoo(f.zoo);
      if (*analyze) {
        const auto j = tl::cmd_analyze(r, zoo, f.out);
        std::cout << "differing heads: " << j.at("differing_heads").size() << "\n";
      } else if (*characterize) {
        tl::cmd_characterize(r, zoo, f.out);
        std::cout << "wrote " << f.out << "/characterize.json\n";
      } else if (*detect) {
        const auto j = tl::cmd_detect(r, zoo, f.out);
        for (const auto& m : j.at("metrics"))
          std::cout << m.at("name").get<std::string>() << " acc " << m.at("acc") << " auc " << m.at("auc") << "\n";
      }
    }
  } catch (const tl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const tl::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
