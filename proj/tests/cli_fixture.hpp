#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>

#include "nudge/dataset.hpp"
#include "nudge/design.hpp"
#include "nudge/simulation.hpp"

namespace nudge::testing {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// Files for a pilot -> design -> main study round trip on the synthetic DGP:
//   pilot.csv (x, z, w), cohort.csv (x only), schema.toml, sim.toml.
// finish_study() then draws the main study under design.csv and writes
// full.csv (pilot + main with y) and full_design.csv.
struct CliFixture {
  std::filesystem::path dir;
  DgpConfig dgp;
  Matrix main_x;
  SimulatedStudy pilot;

  CliFixture(std::filesystem::path where, std::size_t n_pilot = 600, std::size_t n_main = 900,
             std::uint64_t seed = 11)
      : dir(std::move(where)) {
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(seed);
    dgp.n = n_pilot + n_main;
    const Matrix x = generate_covariates(dgp, rng);
    dgp.n = n_pilot;
    pilot = generate_dataset(dgp, x.topRows(static_cast<Eigen::Index>(n_pilot)),
                             NudgePropensity::constant(n_pilot, 0.5), rng);
    main_x = x.bottomRows(static_cast<Eigen::Index>(n_main));

    EncouragementDataset no_y = pilot.data;
    no_y.y.reset();
    write_dataset(no_y, dir / "pilot.csv");

    std::ostringstream cohort;
    cohort << std::setprecision(17);
    const auto& names = pilot.data.column_names;
    for (std::size_t j = 0; j < names.size(); ++j) cohort << (j ? "," : "") << names[j];
    cohort << "\n";
    for (Eigen::Index i = 0; i < main_x.rows(); ++i) {
      for (Eigen::Index j = 0; j < main_x.cols(); ++j) cohort << (j ? "," : "") << main_x(i, j);
      cohort << "\n";
    }
    write_text(dir / "cohort.csv", cohort.str());

    std::ostringstream schema;
    schema << "x = [";
    for (std::size_t j = 0; j < names.size(); ++j) schema << (j ? ", " : "") << '"' << names[j] << '"';
    schema << "]\nz = \"z\"\nw = \"w\"\ny = \"y\"\nscore = \"score\"\n";
    write_text(dir / "schema.toml", schema.str());

    write_text(dir / "sim.toml",
               "seed = 5\nthreads = 1\nreplications = 3\nn_grid = [400, 600]\nn_oracle = 20000\n"
               "[estimator]\nmethod = \"plugin\"\n"
               "[[designs]]\nname = \"rdd\"\nkind = \"rdd\"\nbudget = 0.4\n"
               "[[designs]]\nname = \"optimal\"\nkind = \"optimal\"\nbudget = 0.4\nmonotone = true\n");
  }

  void finish_study(std::uint64_t seed = 12) const {
    const NudgePropensity e_main = load_design_csv(dir / "design.csv");
    std::mt19937_64 rng(seed);
    DgpConfig main_cfg = dgp;
    main_cfg.n = static_cast<std::size_t>(main_x.rows());
    const SimulatedStudy study = generate_dataset(main_cfg, main_x, e_main, rng);
    write_dataset(merge(pilot.data, study.data), dir / "full.csv");
    Vector e(static_cast<Eigen::Index>(pilot.e_z.size() + e_main.size()));
    e << pilot.e_z.values(), e_main.values();
    write_design_csv(NudgePropensity(e), dir / "full_design.csv");
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace nudge::testing
