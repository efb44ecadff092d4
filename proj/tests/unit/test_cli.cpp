#include "doctest.h"

#include "fdemand/csv.hpp"
#include "fdemand/random.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& scratch() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / ("fdemand_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        fdemand::csv::write_file(d / "run.json", R"({
  "synth": {"n_families": 800, "n_agencies": 8},
  "select": {"k_max": 4, "models": ["EII", "EEE", "VVV"]},
  "predict": {"splits": 3, "mars": {"ncross": 1, "nfold": 5}, "rf": {"ntree_grid": [10, 20]}}
})");
        return d;
    }();
    return dir;
}

struct Run {
    int code = -1;
    std::string err;
};

Run run(const std::string& args) {
    const fs::path err = scratch() / "stderr.txt";
    const std::string cmd = "cd " + scratch().string() + " && " + FDEMAND_CLI + " " + args + " >/dev/null 2>" + err.string();
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = fdemand::csv::read_file(err);
    return r;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files[e.path().lexically_relative(dir).generic_string()] = fdemand::csv::read_file(e.path());
    }
    return files;
}

json first_error_line(const std::string& text) { return json::parse(text.substr(0, text.find('\n'))); }

} // namespace

TEST_CASE("pipeline is byte-deterministic for a fixed seed") {
    REQUIRE(run("pipeline --config run.json --seed 7 --out p1").code == 0);
    REQUIRE(run("pipeline --config run.json --seed 7 --out p2 --threads 2").code == 0);
    const auto a = snapshot(scratch() / "p1");
    const auto b = snapshot(scratch() / "p2");
    CHECK(a.size() > 20);
    CHECK(a == b);

    REQUIRE(run("synth --config run.json --seed 8 --out p3").code == 0);
    CHECK(fdemand::csv::read_file(scratch() / "p3" / "services.csv") != a.at("services.csv"));
}

TEST_CASE("manifest records seed, config hash and artifact digests") {
    REQUIRE(run("pipeline --config run.json --seed 11 --out m").code == 0);
    const fs::path dir = scratch() / "m";
    const json m = json::parse(fdemand::csv::read_file(dir / "manifest_pipeline.json"));
    CHECK(m.at("seed") == 11);
    CHECK(m.at("command") == "pipeline");
    CHECK(m.at("config").at("synth").at("n_families") == 800);
    CHECK(m.at("config_hash").get<std::string>().size() == 16);
    CHECK_FALSE(m.at("version").get<std::string>().empty());
    REQUIRE(m.at("artifacts").size() > 20);
    for (const auto& a : m.at("artifacts")) {
        const fs::path p = dir / a.at("path").get<std::string>();
        REQUIRE(fs::exists(p));
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(fdemand::fnv1a(fdemand::csv::read_file(p))));
        CHECK(a.at("fnv1a") == buf);
    }

    // A flag override changes the hash; the output directory does not.
    REQUIRE(run("synth --config run.json --seed 11 --out h1").code == 0);
    REQUIRE(run("synth --config run.json --seed 11 --out h2").code == 0);
    REQUIRE(run("synth --config run.json --seed 11 --out h3 --families 700").code == 0);
    const auto hash = [](const fs::path& d) {
        return json::parse(fdemand::csv::read_file(d / "manifest_synth.json")).at("config_hash").get<std::string>();
    };
    CHECK(hash(scratch() / "h1") == hash(scratch() / "h2"));
    CHECK(hash(scratch() / "h1") != hash(scratch() / "h3"));
}

TEST_CASE("evaluate with and without clusters writes both report sets and the comparison") {
    REQUIRE(run("pipeline --config run.json --seed 3 --out e").code == 0);
    const fs::path dir = scratch() / "e";
    fs::remove(dir / "eval_with_clusters.json");
    fs::remove(dir / "eval_without_clusters.json");
    fs::remove(dir / "comparison.csv");
    REQUIRE(run("evaluate --config run.json --seed 3 --out e --with-clusters --without-clusters --families glm,rf")
                .code == 0);
    const json with = json::parse(fdemand::csv::read_file(dir / "eval_with_clusters.json"));
    const json without = json::parse(fdemand::csv::read_file(dir / "eval_without_clusters.json"));
    REQUIRE(with.size() == 2);
    REQUIRE(without.size() == 2);
    for (const auto& r : with) CHECK(r.at("cluster_features") == true);
    for (const auto& r : without) CHECK(r.at("cluster_features") == false);
    CHECK(with[0].at("family") == "glm");
    CHECK(with[1].at("family") == "rf");

    const auto t = fdemand::csv::read(dir / "comparison.csv");
    REQUIRE(t.rows.size() == 4);
    const std::size_t fam = t.require("family");
    CHECK(t.rows[0][fam] == "glm");
    CHECK(t.rows[1][fam] == "rf");
    CHECK(t.rows[2][fam] == "glm+clusters");
    CHECK(t.rows[3][fam] == "rf+clusters");

    REQUIRE(run("evaluate --config run.json --seed 3 --out e --with-clusters --families glm").code == 0);
    CHECK(fdemand::csv::read(dir / "comparison.csv").rows.size() == 1);
}

TEST_CASE("usage errors exit 2, stage failures exit 1 with a JSON error") {
    CHECK(run("cluster -k 0 --out u").code == 2);
    const Run k0 = run("cluster --k 0 --out u");
    CHECK(k0.code == 2);
    CHECK(first_error_line(k0.err).at("error").at("type") == "usage");

    CHECK(run("cluster --no-such-flag").code == 2);
    CHECK(run("no-such-command").code == 2);
    CHECK(run("").code == 2);
    CHECK(run("select --k-min 5 --k-max 2 --out u").code == 2);
    CHECK(run("select --models XYZ --out u").code == 2);
    CHECK(run("evaluate --families bart --out u").code == 2);

    fdemand::csv::write_file(scratch() / "bad.json", R"({"select": {"kmax": 3}})");
    const Run bad = run("select --config bad.json --out u");
    CHECK(bad.code == 2);
    CHECK(first_error_line(bad.err).at("error").at("message").get<std::string>().find("select.kmax") !=
          std::string::npos);

    const Run missing = run("ingest --out u --services nowhere.csv --income nowhere.csv");
    CHECK(missing.code == 1);
    const json e = first_error_line(missing.err);
    CHECK(e.at("error").at("command") == "ingest");
    CHECK(e.at("error").at("type") == "io_error");

    const Run no_labels = run("report --out empty_dir");
    CHECK(no_labels.code == 1);
}
