#include <cmath>
#include <map>
#include <set>

#include "helpers.hpp"
#include "star/episodic.hpp"

using namespace star;

namespace {

SyntheticSpec small_spec() {
    SyntheticSpec s;
    s.num_classes = 12;
    s.videos_per_class = 6;
    s.dim = 16;
    return s;
}

} // namespace

TEST(Synthetic, NoiselessSameClassVideosDifferOnlyByDrift) {
    SyntheticSpec s = small_spec();
    s.noise_sigma = 0.0;
    const SyntheticData d = generate_synthetic(s, 3);
    const auto& a = d.parts[0];
    const auto& b = d.parts[1];
    ASSERT_EQ(d.dataset.videos[0].class_id, d.dataset.videos[1].class_id);
    EXPECT_EQ(a.motif, b.motif);
    EXPECT_EQ(a.background, b.background);
    const Tensor fa = d.dataset.videos[0].frames, fb = d.dataset.videos[1].frames;
    for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_NEAR(fa[i] - a.drift[i], fb[i] - b.drift[i], 1e-12);

    s.drift_amplitude = 0.0;
    const SyntheticData still = generate_synthetic(s, 3);
    EXPECT_EQ(still.dataset.videos[0].frames, still.dataset.videos[1].frames);
}

TEST(Synthetic, MotifOccupiesOnlyThePhaseFrames) {
    const SyntheticData d = generate_synthetic(small_spec(), 4);
    for (std::size_t v = 0; v < d.parts.size(); v += 7) {
        const std::size_t cls = d.dataset.videos[v].class_id, phase = d.world.phases[cls];
        for (std::size_t t = 0; t < 8; ++t) {
            double energy = 0.0;
            for (std::size_t j = 0; j < 16; ++j) energy += std::abs(d.parts[v].motif(t, j));
            if (t >= phase && t < phase + 2)
                EXPECT_GT(energy, 0.0);
            else
                EXPECT_EQ(energy, 0.0);
        }
    }
}

TEST(Synthetic, DeterministicPerSeed) {
    const SyntheticData a = generate_synthetic(small_spec(), 9), b = generate_synthetic(small_spec(), 9);
    const SyntheticData c = generate_synthetic(small_spec(), 10);
    ASSERT_EQ(a.dataset.videos.size(), b.dataset.videos.size());
    for (std::size_t i = 0; i < a.dataset.videos.size(); ++i) EXPECT_EQ(a.dataset.videos[i].frames, b.dataset.videos[i].frames);
    EXPECT_NE(a.dataset.videos[0].frames, c.dataset.videos[0].frames);
    EXPECT_NO_THROW(a.dataset.validate());
}

TEST(Synthetic, InvalidSpecsThrow) {
    SyntheticSpec s = small_spec();
    s.motif_len = s.frames;
    EXPECT_THROW(generate_synthetic(s, 1), ConfigError);
    s = small_spec();
    s.noise_sigma = -0.1;
    EXPECT_THROW(generate_synthetic(s, 1), ConfigError);
    s = small_spec();
    s.num_classes = 1;
    EXPECT_THROW(generate_synthetic(s, 1), ConfigError);
}

TEST(Synthetic, NoiselessDataIsPerfectlySeparableByRawPrototypes) {
    SyntheticSpec s = small_spec();
    s.noise_sigma = 0.0;
    s.drift_amplitude = 0.0;
    const Dataset d = generate_synthetic(s, 5).dataset;
    for (Metric m : {Metric::otam, Metric::bimhm}) {
        const EvalReport r = evaluate(raw_prototype_scorer(m), d, 5, 1, 5, 200, 2);
        EXPECT_DOUBLE_EQ(r.accuracy, 1.0) << metric_name(m);
    }
}

TEST(SplitByClass, DisjointClassSets) {
    const Dataset d = generate_synthetic(small_spec(), 6).dataset;
    const auto [train, test] = split_by_class(d, 8);
    EXPECT_EQ(train.class_ids().size(), 8u);
    EXPECT_EQ(test.class_ids().size(), 4u);
    for (const auto& v : test.videos) EXPECT_GE(v.class_id, 8u);
    EXPECT_EQ(train.videos.size() + test.videos.size(), d.videos.size());
    EXPECT_THROW(split_by_class(d, 12), ConfigError);
}

TEST(Dataset, ValidateCatchesShapeAndClassErrors) {
    Dataset d = generate_synthetic(small_spec(), 7).dataset;
    d.videos[0].frames = Tensor({8, 15});
    EXPECT_THROW(d.validate(), DimensionError);
    d = generate_synthetic(small_spec(), 7).dataset;
    d.videos[0].class_id = 99;
    EXPECT_THROW(d.validate(), InconsistencyError);
}

TEST(SampleEpisode, ForcedAssignmentStaysDisjoint) {
    SyntheticSpec s = small_spec();
    s.num_classes = 5;
    s.videos_per_class = 2;
    const Dataset d = generate_synthetic(s, 8).dataset;
    std::mt19937_64 rng(1);
    const Episode ep = sample_episode(d, 5, 1, 5, rng);
    std::set<std::uint32_t> sup, qry;
    for (const auto& x : ep.support) sup.insert(x.video_id);
    for (const auto& x : ep.queries) qry.insert(x.video_id);
    EXPECT_EQ(sup.size() + qry.size(), 10u);
    for (auto id : qry) EXPECT_EQ(sup.count(id), 0u);
}

TEST(SampleEpisode, SameSeedSameEpisode) {
    const Dataset d = generate_synthetic(small_spec(), 9).dataset;
    std::mt19937_64 r1(42), r2(42);
    const Episode a = sample_episode(d, 5, 2, 7, r1), b = sample_episode(d, 5, 2, 7, r2);
    EXPECT_EQ(a.classes, b.classes);
    for (std::size_t i = 0; i < a.support.size(); ++i) EXPECT_EQ(a.support[i].video_id, b.support[i].video_id);
    for (std::size_t i = 0; i < a.queries.size(); ++i) EXPECT_EQ(a.queries[i].video_id, b.queries[i].video_id);
}

TEST(SampleEpisode, DisjointAndWellFormedOverTenThousandSamples) {
    const Dataset d = generate_synthetic(small_spec(), 10).dataset;
    std::map<std::uint32_t, std::uint32_t> class_of;
    for (const auto& v : d.videos) class_of[v.video_id] = v.class_id;
    std::mt19937_64 rng(11);
    for (int i = 0; i < 10000; ++i) {
        const Episode ep = sample_episode(d, 5, 2, 6, rng);
        std::set<std::uint32_t> sup;
        std::vector<std::size_t> per_class(5, 0);
        for (const auto& x : ep.support) {
            sup.insert(x.video_id);
            ++per_class.at(x.label);
            ASSERT_EQ(class_of.at(x.video_id), ep.classes[x.label]);
        }
        for (auto n : per_class) ASSERT_EQ(n, 2u);
        for (const auto& q : ep.queries) {
            ASSERT_EQ(sup.count(q.video_id), 0u) << "episode " << i;
            ASSERT_LT(q.label, 5u);
            ASSERT_EQ(class_of.at(q.video_id), ep.classes[q.label]);
        }
        ASSERT_EQ(ep.descriptors.size(), 5u);
    }
}

TEST(SampleEpisode, ClassSelectionIsUniform) {
    SyntheticSpec s = small_spec();
    s.num_classes = 20;
    s.videos_per_class = 3;
    const Dataset d = generate_synthetic(s, 12).dataset;
    std::mt19937_64 rng(13);
    std::vector<double> count(20, 0.0);
    const int n = 10000;
    for (int i = 0; i < n; ++i)
        for (auto c : sample_episode(d, 5, 1, 5, rng).classes) count[c] += 1.0;
    const double p = 5.0 / 20.0, mean = n * p, sd = std::sqrt(n * p * (1 - p));
    for (std::size_t c = 0; c < 20; ++c) EXPECT_NEAR(count[c], mean, 3 * sd) << "class " << c;
}

TEST(SampleEpisode, CapacityErrorsNameTheProblem) {
    SyntheticSpec s = small_spec();
    s.videos_per_class = 2;
    const Dataset d = generate_synthetic(s, 14).dataset;
    std::mt19937_64 rng(1);
    EXPECT_THROW(sample_episode(d, 13, 1, 13, rng), CapacityError);
    try {
        sample_episode(d, 5, 2, 5, rng);
        FAIL() << "expected a capacity error";
    } catch (const CapacityError& e) {
        EXPECT_NE(std::string(e.what()).find("class 0"), std::string::npos) << e.what();
    }
}
