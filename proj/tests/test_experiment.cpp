#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "latbeam/experiment.hpp"

using namespace latbeam;

namespace {

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.vocab_size = 5;
    c.hidden_size = 4;
    c.max_length = 5;
    c.oracle_max_length = 4;
    c.instances = 6;
    c.k_values = {1, 2, kInfiniteHistory};
    c.b_values = {4};
    return c;
}

std::string field_of(const std::string& text) {
    try {
        ExperimentConfig::parse(text);
    } catch (const ConfigError& e) {
        return e.field();
    }
    return "<accepted>";
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndLists) {
    const auto c = ExperimentConfig::parse(
        "# sweep\n"
        "family = limited\n"
        "context_length = 3   # window\n"
        "k_values = 1, 3,inf\n"
        "b_values = 4,8\n"
        "\n"
        "alpha = 0.5\n"
        "distance = euclidean\n"
        "finished_policy = set_aside\n"
        "include_gt = false\n");
    EXPECT_EQ(c.family, "limited");
    EXPECT_EQ(c.context_length, 3u);
    EXPECT_EQ(c.k_values, (std::vector<std::size_t>{1, 3, kInfiniteHistory}));
    EXPECT_EQ(c.b_values, (std::vector<std::size_t>{4, 8}));
    EXPECT_EQ(c.alpha, 0.5);
    EXPECT_EQ(c.distance, DistanceForm::kEuclidean);
    EXPECT_EQ(c.finished_policy, FinishedPolicy::kSetAside);
    EXPECT_FALSE(c.include_gt);
}

TEST(Config, ErrorsNameTheField) {
    EXPECT_EQ(field_of("beam = 3\n"), "beam");
    EXPECT_EQ(field_of("vocab_size = five\n"), "vocab_size");
    EXPECT_EQ(field_of("vocab_size = 1\n"), "vocab_size");
    EXPECT_EQ(field_of("alpha = -1\n"), "alpha");
    EXPECT_EQ(field_of("alpha = nan\n"), "alpha");
    EXPECT_EQ(field_of("k_values = 0,2\n"), "k_values");
    EXPECT_EQ(field_of("b_values = inf\n"), "b_values");
    EXPECT_EQ(field_of("family = transformer\n"), "family");
    EXPECT_EQ(field_of("instances = 0\n"), "instances");
    EXPECT_EQ(field_of("seed = 1\nseed = 2\n"), "seed");
    EXPECT_EQ(field_of("max_length = 3\n"), "oracle_max_length");
    EXPECT_EQ(field_of("include_gt = maybe\n"), "include_gt");
    EXPECT_EQ(field_of("just words\n"), "");
    EXPECT_EQ(field_of("max_length = 7\noracle_max_length = 7\n"), "<accepted>");
}

TEST(StatsSweep, CsvSchemaAndRowCount) {
    auto c = small_config();
    c.b_values = {2, 4};
    const auto rows = stats_sweep(c, 2);
    ASSERT_EQ(rows.size(), 6u);
    const std::string csv = sweep_csv(rows);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "k,b,log_score_mass,num_sequences_log10,num_recombinations,mean_distance");
    std::size_t n = 0;
    while (std::getline(in, line)) {
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
        ++n;
    }
    EXPECT_EQ(n, 6u);
    EXPECT_EQ(rows[0].b, 2u);
    EXPECT_EQ(rows[5].k, kInfiniteHistory);
    EXPECT_NE(csv.find("\ninf,4,"), std::string::npos);
}

TEST(StatsSweep, InfiniteHistoryIsPlainNbest) {
    auto c = small_config();
    c.b_values = {8};
    c.k_values = {kInfiniteHistory};
    c.max_length = 6;
    const auto rows = stats_sweep(c, 1);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].num_recombinations, 0.0);
    EXPECT_FALSE(rows[0].mean_distance.has_value());
    EXPECT_LE(rows[0].num_sequences_log10, std::log10(8.0) + 1e-12);
}

TEST(StatsSweep, LimitedContextDistanceVanishesAtContextLength) {
    auto c = small_config();
    c.family = "limited";
    c.context_length = 3;
    c.vocab_size = 4;
    c.max_length = 7;
    c.k_values = {1, 2, 3, 4};
    c.b_values = {8};
    const auto rows = stats_sweep(c, 2);
    ASSERT_TRUE(rows[0].mean_distance.has_value());
    EXPECT_GT(*rows[0].mean_distance, 0.0);
    for (std::size_t i = 2; i < 4; ++i) {
        if (rows[i].mean_distance) {
            EXPECT_EQ(*rows[i].mean_distance, 0.0) << "k=" << rows[i].k;
        }
    }
    EXPECT_GT(rows[2].num_recombinations, 0.0);
}

TEST(StatsSweep, IndependentOfThreadCount) {
    const auto c = small_config();
    const auto a = sweep_csv(stats_sweep(c, 1));
    EXPECT_EQ(a, sweep_csv(stats_sweep(c, 2)));
    EXPECT_EQ(a, sweep_csv(stats_sweep(c, 8)));
}

TEST(OracleCheck, SmallEnvelopePasses) {
    auto c = small_config();
    c.instances = 3;
    const auto report = oracle_check(c, 2);
    for (const auto& check : report.checks) {
        EXPECT_TRUE(check.passed) << check.name << " delta=" << check.max_delta << " " << check.detail;
    }
    EXPECT_TRUE(report.passed());
    const auto j = report.to_json();
    EXPECT_TRUE(j.at("passed").get<bool>());
    EXPECT_GE(j.at("checks").size(), 7u);
}

TEST(OracleCheck, CorruptedToleranceIsReported) {
    auto c = small_config();
    c.instances = 3;
    c.tolerance = 1e-30;
    const auto report = oracle_check(c, 1);
    EXPECT_FALSE(report.passed());
    bool some_failed_with_delta = false;
    for (const auto& check : report.checks) {
        if (!check.passed && std::isfinite(check.max_delta) && check.max_delta > 0.0) {
            some_failed_with_delta = true;
        }
    }
    EXPECT_TRUE(some_failed_with_delta);
}

TEST(OracleCheck, BudgetViolationReportedNotThrown) {
    auto c = small_config();
    c.instances = 1;
    c.oracle_max_sequences = 10;
    const auto report = oracle_check(c, 1);
    EXPECT_FALSE(report.passed());
    bool budget_message = false;
    for (const auto& check : report.checks) {
        budget_message = budget_message || check.detail.find("guard") != std::string::npos;
    }
    EXPECT_TRUE(budget_message);
}

TEST(FigureOne, DemoRoundTripsAndListsMergedVariants) {
    const Lattice l = figure_one_lattice();
    EXPECT_EQ(deserialize(serialize(l)), l);
    const auto vocab = figure_one_vocabulary();
    std::vector<std::string> spelled;
    for (const auto& p : enumerate_paths(l, 100)) {
        spelled.push_back(vocab.render(p.tokens));
    }
    EXPECT_NE(std::find(spelled.begin(), spelled.end(), "BBDC"), spelled.end());
    EXPECT_NE(std::find(spelled.begin(), spelled.end(), "CBDC"), spelled.end());
}

TEST(SyntheticTask, TargetsAreFinishedAndDeterministic) {
    auto c = small_config();
    c.train_size = 5;
    c.heldout_size = 3;
    const auto a = make_synthetic_task(c);
    const auto b = make_synthetic_task(c);
    ASSERT_EQ(a.train.size(), 5u);
    ASSERT_EQ(a.heldout.size(), 3u);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        EXPECT_TRUE(is_finished(a.train[i].target, 4));
        EXPECT_LE(a.train[i].target.size(), c.max_length + 1);
        EXPECT_EQ(a.train[i].target, b.train[i].target);
    }
}

TEST(Training, MetricsCsvSchema) {
    const std::vector<EpochMetrics> log{{0, -1.5, 0.25, 3.0}, {1, -1.25, 0.125, 2.5}};
    EXPECT_EQ(metrics_csv(log),
              "epoch,mean_F,token_error_rate,num_recombinations_mean\n0,-1.5,0.25,3\n1,-1.25,0.125,2.5\n");
}
