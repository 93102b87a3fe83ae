#include "qlio/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace {

int fail(const char* type, const std::exception& e) {
  std::cerr << "error: " << type << ": " << e.what() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantized LiDAR-inertial odometry runner"};
  std::string config_path, mode, transport, out_dir = "out", sweep_spec;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--mode", mode, "qlio | baseline-float | baseline-int8 | qlio-no-rqrs");
  app.add_option("--transport", transport, "inproc | socket:PORT");
  auto* seed_opt = app.add_option("--seed", seed, "base seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--sweep", sweep_spec, "codebook sweep, e.g. \"lp=3..12,ln=3,lz=2\"");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    qlio::RunConfig config;
    if (!config_path.empty()) config = qlio::load_config(config_path, config);
    if (!mode.empty()) config.mode = qlio::parse_mode(mode);
    if (!transport.empty()) config.transport = qlio::parse_transport(transport);
    if (*seed_opt) config.seed = seed;
    config.out_dir = out_dir;
    config.validate();

    const std::filesystem::path dir(out_dir);
    if (app.count("--sweep") > 0) {
      const auto spec = qlio::parse_sweep(sweep_spec, config.codebook);
      const auto rows = qlio::sweep(config, spec);
      std::filesystem::create_directories(dir);
      std::ofstream f(dir / "sweep.csv");
      if (!f) throw qlio::ConfigError("cannot write " + (dir / "sweep.csv").string());
      qlio::write_sweep_csv(rows, f);
      std::cout << "sweep: " << rows.size() << " rows -> " << (dir / "sweep.csv").string() << '\n';
      return 0;
    }

    const qlio::RunResult result = qlio::run(config);
    qlio::write_outputs(result, config, dir);
    const auto& m = result.metrics;
    std::cout << qlio::to_string(config.mode) << ": scans=" << m.scans
              << " ate=" << m.ate_translation << " m"
              << " bits/meas=" << m.bits_per_measurement
              << " meas/scan=" << m.mean_measurements_per_scan << '\n';
    if (m.numerically_diverged) std::cout << "diverged: " << m.failure << '\n';
    return 0;
  } catch (const qlio::ConfigError& e) {
    return fail("ConfigError", e);
  } catch (const qlio::TransportError& e) {
    return fail("TransportError", e);
  } catch (const qlio::ProtocolError& e) {
    return fail("ProtocolError", e);
  } catch (const qlio::NumericalError& e) {
    return fail("NumericalError", e);
  } catch (const qlio::InvalidArgument& e) {
    return fail("InvalidArgument", e);
  } catch (const std::exception& e) {
    return fail("Error", e);
  }
}
