#include "csty/schemes.hpp"

#include <gtest/gtest.h>

#include "csty/rng.hpp"

using namespace csty;

namespace {

Mat random_mat(Rng& rng, int rows, int cols) {
    Mat m(rows, cols);
    for (auto& v : m.data) v = rng.gaussian();
    return m;
}

AttentionState make_state(Rng& rng, int batch, int n, int d) {
    AttentionState s;
    for (int i = 0; i < batch; ++i) {
        s.q.push_back(random_mat(rng, n, d));
        s.k.push_back(random_mat(rng, n, d));
        s.v.push_back(random_mat(rng, n, d));
    }
    return s;
}

LayerInfo high_res_layer() { return {"dec0.self", 2, 2, true}; }
LayerInfo low_res_layer() { return {"mid.self", 1, 2, false}; }

struct Fixture {
    std::vector<SubjectMask> masks;
    std::vector<CorrespondenceMap> maps;
    std::vector<const CorrespondenceMap*> corr;
    std::vector<int> anchors{0};

    InterventionContext ctx(const LayerInfo& layer, int step, bool guided, Toggles t = {},
                            const ValueStore* store = nullptr) {
        InterventionContext c;
        c.step = step;
        c.total_steps = 10;
        c.layer = layer;
        c.guided = guided;
        c.qk_window = {2, 5};
        c.vsd_window = {2, 5};
        c.toggles = t;
        c.masks = masks;
        c.corr = corr;
        c.anchors = anchors;
        c.store = store;
        return c;
    }
};

// two images on a 2x2 grid; image 1's subject patches 0 and 3 correspond to
// anchor patches 2 and 1
Fixture two_image_fixture() {
    Fixture f;
    f.masks.push_back(SubjectMask{0, 2, 2, {1, 2}});
    f.masks.push_back(SubjectMask{1, 2, 2, {0, 3}});
    CorrespondenceMap m;
    m.image_index = 1;
    m.entries.push_back({0, 0, 2, 0.9f});
    m.entries.push_back({3, 0, 1, 0.8f});
    f.maps.push_back(m);
    f.corr = {nullptr, &f.maps[0]};
    return f;
}

} // namespace

TEST(SchemeTokens, RoundTrip) {
    for (Scheme s : {Scheme::vanilla, Scheme::consistyle, Scheme::consistory, Scheme::cross_image,
                     Scheme::style_aligned, Scheme::illusign})
        EXPECT_EQ(parse_scheme(scheme_token(s)), s);
    try {
        parse_scheme("exotic");
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("style-aligned"), std::string::npos);
    }
}

TEST(StepWindowType, FractionsResolveToHalfOpenSteps) {
    const StepWindow w = StepWindow::from_fractions(0.1, 0.3, 50);
    EXPECT_EQ(w.lo, 5);
    EXPECT_EQ(w.hi, 15);
    EXPECT_FALSE(w.contains(4));
    EXPECT_TRUE(w.contains(5));
    EXPECT_TRUE(w.contains(14));
    EXPECT_FALSE(w.contains(15));

    const StepWindow full = StepWindow::from_fractions(0.0, 1.0, 7);
    EXPECT_EQ(full.lo, 0);
    EXPECT_EQ(full.hi, 7);

    // non-integer products round up
    const StepWindow frac = StepWindow::from_fractions(0.25, 0.55, 10);
    EXPECT_EQ(frac.lo, 3);
    EXPECT_EQ(frac.hi, 6);

    const StepWindow small = StepWindow::from_fractions(0.1, 0.3, 10);
    EXPECT_EQ(small.lo, 1);
    EXPECT_EQ(small.hi, 3);
}

TEST(SchemeSpecType, AnchorValidation) {
    SchemeSpec vanilla;
    vanilla.validate(4); // vanilla needs no anchors

    SchemeSpec s{Scheme::consistyle, {0, 2}};
    s.validate(4);
    EXPECT_TRUE(s.is_anchor(0));
    EXPECT_FALSE(s.is_anchor(1));
    EXPECT_TRUE(s.is_anchor(2));

    EXPECT_THROW((SchemeSpec{Scheme::consistyle, {}}).validate(4), std::invalid_argument);
    EXPECT_THROW((SchemeSpec{Scheme::consistyle, {4}}).validate(4), std::invalid_argument);
    EXPECT_THROW((SchemeSpec{Scheme::consistyle, {1, 1}}).validate(4), std::invalid_argument);
}

TEST(InjectQk, SubstitutesExactlyTheMappedRows) {
    Rng rng(1);
    Fixture f = two_image_fixture();
    AttentionState state = make_state(rng, 2, 4, 3);
    const AttentionState before = state;
    const InterventionContext ctx = f.ctx(high_res_layer(), 3, true);
    EXPECT_TRUE(inject_qk(state, ctx, 1));
    for (int c = 0; c < 3; ++c) {
        // mapped rows take the anchor's values
        EXPECT_EQ(state.q[1].at(0, c), before.q[0].at(2, c));
        EXPECT_EQ(state.k[1].at(0, c), before.k[0].at(2, c));
        EXPECT_EQ(state.q[1].at(3, c), before.q[0].at(1, c));
        EXPECT_EQ(state.k[1].at(3, c), before.k[0].at(1, c));
        // complement rows stay bitwise identical
        EXPECT_EQ(state.q[1].at(1, c), before.q[1].at(1, c));
        EXPECT_EQ(state.q[1].at(2, c), before.q[1].at(2, c));
    }
    // values and the anchor image are untouched
    EXPECT_TRUE(state.v[1].bitwise_equal(before.v[1]));
    EXPECT_TRUE(state.q[0].bitwise_equal(before.q[0]));
    EXPECT_TRUE(state.k[0].bitwise_equal(before.k[0]));
}

TEST(InjectQk, FiresOnlyInsideItsGates) {
    Rng rng(2);
    Fixture f = two_image_fixture();
    AttentionState state = make_state(rng, 2, 4, 3);
    const AttentionState before = state;

    EXPECT_FALSE(inject_qk(state, f.ctx(high_res_layer(), 3, false), 1)); // unguided half
    EXPECT_FALSE(inject_qk(state, f.ctx(high_res_layer(), 5, true), 1));  // step past the window
    EXPECT_FALSE(inject_qk(state, f.ctx(high_res_layer(), 1, true), 1));  // step before the window
    EXPECT_FALSE(inject_qk(state, f.ctx(low_res_layer(), 3, true), 1));   // wrong resolution
    Toggles off;
    off.qk_inject = false;
    EXPECT_FALSE(inject_qk(state, f.ctx(high_res_layer(), 3, true, off), 1));
    EXPECT_TRUE(state.q[1].bitwise_equal(before.q[1]));
    EXPECT_TRUE(state.k[1].bitwise_equal(before.k[1]));

    // empty subject mask skips quietly
    Fixture empty = two_image_fixture();
    empty.masks[1].patch_indices.clear();
    EXPECT_FALSE(inject_qk(state, empty.ctx(high_res_layer(), 3, true), 1));

    // a live gate with no correspondence is a wiring bug
    Fixture broken = two_image_fixture();
    broken.corr[1] = nullptr;
    EXPECT_THROW(inject_qk(state, broken.ctx(high_res_layer(), 3, true), 1), std::runtime_error);
}

TEST(InjectQk, QueriesOnlyAndKeysOnly) {
    Rng rng(3);
    Fixture f = two_image_fixture();

    Toggles queries_only;
    queries_only.qk_keys = false;
    AttentionState sq = make_state(rng, 2, 4, 3);
    const AttentionState before_q = sq;
    EXPECT_TRUE(inject_qk(sq, f.ctx(high_res_layer(), 3, true, queries_only), 1));
    EXPECT_TRUE(sq.k[1].bitwise_equal(before_q.k[1]));
    EXPECT_EQ(sq.q[1].at(0, 0), before_q.q[0].at(2, 0));

    Toggles keys_only;
    keys_only.qk_queries = false;
    AttentionState sk = make_state(rng, 2, 4, 3);
    const AttentionState before_k = sk;
    EXPECT_TRUE(inject_qk(sk, f.ctx(high_res_layer(), 3, true, keys_only), 1));
    EXPECT_TRUE(sk.q[1].bitwise_equal(before_k.q[1]));
    EXPECT_EQ(sk.k[1].at(0, 0), before_k.k[0].at(2, 0));

    Toggles neither;
    neither.qk_queries = false;
    neither.qk_keys = false;
    EXPECT_FALSE(inject_qk(sk, f.ctx(high_res_layer(), 3, true, neither), 1));
}

TEST(InjectVsd, ReplacesValuesFromTheStoreOnBothHalves) {
    Rng rng(4);
    Fixture f = two_image_fixture();
    ValueStore store("dec0.self", 2, 5);
    const Mat u = random_mat(rng, 4, 3), c = random_mat(rng, 4, 3);
    store.record(3, "dec0.self", 1, u, c);

    AttentionState guided_state = make_state(rng, 2, 4, 3);
    EXPECT_TRUE(inject_vsd(guided_state, f.ctx(high_res_layer(), 3, true, {}, &store), 1));
    EXPECT_TRUE(guided_state.v[1].bitwise_equal(c));

    AttentionState uncond_state = make_state(rng, 2, 4, 3);
    EXPECT_TRUE(inject_vsd(uncond_state, f.ctx(high_res_layer(), 3, false, {}, &store), 1));
    EXPECT_TRUE(uncond_state.v[1].bitwise_equal(u));
}

TEST(InjectVsd, GatesAndFailures) {
    Rng rng(5);
    Fixture f = two_image_fixture();
    ValueStore store("dec0.self", 2, 5);
    store.record(3, "dec0.self", 1, random_mat(rng, 4, 3), random_mat(rng, 4, 3));

    AttentionState state = make_state(rng, 2, 4, 3);
    const AttentionState before = state;
    EXPECT_FALSE(inject_vsd(state, f.ctx(high_res_layer(), 7, true, {}, &store), 1)); // outside window
    EXPECT_FALSE(inject_vsd(state, f.ctx(low_res_layer(), 3, true, {}, &store), 1));  // wrong layer
    Toggles off;
    off.vsd_inject = false;
    EXPECT_FALSE(inject_vsd(state, f.ctx(high_res_layer(), 3, true, off), 1));
    EXPECT_TRUE(state.v[1].bitwise_equal(before.v[1]));

    EXPECT_THROW(inject_vsd(state, f.ctx(high_res_layer(), 3, true), 1), std::runtime_error); // no store
    // recorded window missing this step: lookup reports the mismatch
    EXPECT_THROW(inject_vsd(state, f.ctx(high_res_layer(), 4, true, {}, &store), 1), std::runtime_error);
}

TEST(Crossing, SingleImageIsIdentity) {
    Rng rng(6);
    Fixture f;
    f.masks.push_back(SubjectMask{0, 2, 2, {1, 2}});
    AttentionState state = make_state(rng, 1, 4, 3);
    const auto [k_ext, v_ext] = cross_attention_components(state, f.ctx(high_res_layer(), 3, true), 0);
    EXPECT_TRUE(k_ext.bitwise_equal(state.k[0]));
    EXPECT_TRUE(v_ext.bitwise_equal(state.v[0]));
}

TEST(Crossing, ExtendedDictionaryRowCountAndLayout) {
    Rng rng(7);
    Fixture f;
    f.masks.push_back(SubjectMask{0, 4, 4, SubjectMask::full(0, 4, 4).patch_indices});
    f.masks.push_back(SubjectMask{1, 4, 4, {2, 7, 11}});
    AttentionState state = make_state(rng, 2, 16, 4);
    const InterventionContext ctx = f.ctx(high_res_layer(), 3, true);

    const auto [k_ext, v_ext] = cross_attention_components(state, ctx, 0);
    ASSERT_EQ(k_ext.rows, 19); // 16 own rows + 3 imported subject rows
    ASSERT_EQ(v_ext.rows, 19);
    // own block first (position 0 of the batch order), imported block after
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 4; ++c) ASSERT_EQ(k_ext.at(r, c), state.k[0].at(r, c));
    const int s1[] = {2, 7, 11};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) ASSERT_EQ(k_ext.at(16 + r, c), state.k[1].at(s1[r], c));
    // imported values are renormalized to the target's channel statistics
    const Mat expected_block = adain(select_rows(state.v[1], s1), state.v[0]);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) ASSERT_EQ(v_ext.at(16 + r, c), expected_block.at(r, c));
}

TEST(Crossing, OwnBlockSitsAtItsBatchPosition) {
    Rng rng(8);
    Fixture f;
    f.masks.push_back(SubjectMask{0, 2, 2, {0, 1}});
    f.masks.push_back(SubjectMask{1, 2, 2, {3}});
    f.masks.push_back(SubjectMask{2, 2, 2, {1, 2}});
    AttentionState state = make_state(rng, 3, 4, 3);
    const auto [k_ext, v_ext] = cross_attention_components(state, f.ctx(high_res_layer(), 3, true), 1);
    ASSERT_EQ(k_ext.rows, 2 + 4 + 2); // |s_0| + N + |s_2|
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c) ASSERT_EQ(k_ext.at(2 + r, c), state.k[1].at(r, c));
    // own value rows are imported untouched
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c) ASSERT_EQ(v_ext.at(2 + r, c), state.v[1].at(r, c));
}

TEST(Crossing, StatGuardRenormalizesImportedValues) {
    Rng rng(9);
    Fixture f;
    f.masks.push_back(SubjectMask{0, 4, 4, SubjectMask::full(0, 4, 4).patch_indices});
    f.masks.push_back(SubjectMask{1, 4, 4, SubjectMask::full(1, 4, 4).patch_indices});
    AttentionState state = make_state(rng, 2, 16, 4);
    // give image 1 wildly different value statistics
    for (auto& v : state.v[1].data) v = v * 8.0f + 5.0f;

    const auto [k_ext, v_ext] = cross_attention_components(state, f.ctx(high_res_layer(), 3, true), 0);
    Mat imported(16, 4);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 4; ++c) imported.at(r, c) = v_ext.at(16 + r, c);
    const ChannelStats target = channel_stats(state.v[0]);
    const ChannelStats got = channel_stats(imported);
    for (int c = 0; c < 4; ++c) {
        EXPECT_NEAR(got.mean[c], target.mean[c], 1e-4);
        EXPECT_NEAR(got.stdev[c], target.stdev[c], 1e-4);
    }

    // with the guard off the foreign statistics leak through unchanged
    Toggles raw;
    raw.adain_in_crossing = false;
    const auto [k_raw, v_raw] = cross_attention_components(state, f.ctx(high_res_layer(), 3, true, raw), 0);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 4; ++c) ASSERT_EQ(v_raw.at(16 + r, c), state.v[1].at(r, c));
}

TEST(ModifyComponents, VanillaTouchesNothing) {
    Rng rng(10);
    Fixture f = two_image_fixture();
    AttentionState state = make_state(rng, 2, 4, 3);
    const AttentionState before = state;
    SchemeSpec spec{Scheme::vanilla, {}};
    for (int i = 0; i < 2; ++i) modify_components(spec, state, f.ctx(high_res_layer(), 3, true), i);
    for (int i = 0; i < 2; ++i) {
        EXPECT_TRUE(state.q[i].bitwise_equal(before.q[i]));
        EXPECT_TRUE(state.k[i].bitwise_equal(before.k[i]));
        EXPECT_TRUE(state.v[i].bitwise_equal(before.v[i]));
    }
}

TEST(ModifyComponents, CrossImageTakesAnchorKeysAndValuesEverywhere) {
    Rng rng(11);
    Fixture f = two_image_fixture();
    AttentionState state = make_state(rng, 2, 4, 3);
    const AttentionState before = state;
    SchemeSpec spec{Scheme::cross_image, {0}};
    // whole-tensor substitution is not tied to the high-resolution grid
    const InterventionContext ctx = f.ctx(low_res_layer(), 8, true);
    for (int i = 0; i < 2; ++i) modify_components(spec, state, ctx, i);
    EXPECT_TRUE(state.k[1].bitwise_equal(before.k[0]));
    EXPECT_TRUE(state.v[1].bitwise_equal(before.v[0]));
    EXPECT_TRUE(state.q[1].bitwise_equal(before.q[1]));
    EXPECT_TRUE(state.k[0].bitwise_equal(before.k[0]));
}

TEST(ModifyComponents, StyleAlignedRenormalizesQueriesAndKeys) {
    Rng rng(12);
    Fixture f = two_image_fixture();
    AttentionState state = make_state(rng, 2, 16, 4);
    for (auto& v : state.q[1].data) v = v * 3.0f - 2.0f;
    const AttentionState before = state;
    SchemeSpec spec{Scheme::style_aligned, {0}};
    for (int i = 0; i < 2; ++i) modify_components(spec, state, f.ctx(low_res_layer(), 8, true), i);
    const ChannelStats qa = channel_stats(before.q[0]);
    const ChannelStats q1 = channel_stats(state.q[1]);
    const ChannelStats ka = channel_stats(before.k[0]);
    const ChannelStats k1 = channel_stats(state.k[1]);
    for (int c = 0; c < 4; ++c) {
        EXPECT_NEAR(q1.mean[c], qa.mean[c], 1e-4);
        EXPECT_NEAR(q1.stdev[c], qa.stdev[c], 1e-4);
        EXPECT_NEAR(k1.mean[c], ka.mean[c], 1e-4);
        EXPECT_NEAR(k1.stdev[c], ka.stdev[c], 1e-4);
    }
    EXPECT_TRUE(state.v[1].bitwise_equal(before.v[1]));
    EXPECT_TRUE(state.q[0].bitwise_equal(before.q[0]));
}

TEST(ModifyComponents, IllusignBlendsQueriesAndTakesAnchorDictionary) {
    Rng rng(13);
    Fixture f = two_image_fixture();
    AttentionState state = make_state(rng, 2, 4, 3);
    const AttentionState before = state;
    SchemeSpec spec{Scheme::illusign, {0}};
    for (int i = 0; i < 2; ++i) modify_components(spec, state, f.ctx(low_res_layer(), 8, true), i);
    for (size_t n = 0; n < state.q[1].data.size(); ++n)
        ASSERT_EQ(state.q[1].data[n], before.q[1].data[n] + 0.5f * before.q[0].data[n]);
    EXPECT_TRUE(state.k[1].bitwise_equal(before.k[0]));
    EXPECT_TRUE(state.v[1].bitwise_equal(before.v[0]));
    EXPECT_TRUE(state.q[0].bitwise_equal(before.q[0]));
}

TEST(CrossComponents, ConsistoryPutsOwnBlockFirstAndImportsRaw) {
    Rng rng(14);
    Fixture f;
    f.masks.push_back(SubjectMask{0, 2, 2, {1, 2}});
    f.masks.push_back(SubjectMask{1, 2, 2, {0, 3}});
    f.masks.push_back(SubjectMask{2, 2, 2, {2}});
    AttentionState state = make_state(rng, 3, 4, 3);
    for (auto& v : state.v[0].data) v = v * 6.0f + 3.0f; // distinctive stats must survive
    SchemeSpec spec{Scheme::consistory, {0}};
    const InterventionContext ctx = f.ctx(high_res_layer(), 3, true);
    for (int i = 0; i < 3; ++i) cross_components(spec, state, ctx, i);

    // image 1's dictionary: own 4 rows, then image 0's 2 rows, then image 2's 1
    ASSERT_EQ(state.k_ext[1].rows, 4 + 2 + 1);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c) ASSERT_EQ(state.k_ext[1].at(r, c), state.k[1].at(r, c));
    for (int c = 0; c < 3; ++c) {
        ASSERT_EQ(state.k_ext[1].at(4, c), state.k[0].at(1, c));
        ASSERT_EQ(state.k_ext[1].at(5, c), state.k[0].at(2, c));
        ASSERT_EQ(state.k_ext[1].at(6, c), state.k[2].at(2, c));
        // raw values: no statistics guard in this scheme
        ASSERT_EQ(state.v_ext[1].at(4, c), state.v[0].at(1, c));
    }

    // nothing happens away from the high-resolution grid
    AttentionState low = make_state(rng, 3, 4, 3);
    cross_components(spec, low, f.ctx(low_res_layer(), 3, true), 1);
    EXPECT_TRUE(low.k_ext.empty() || low.k_ext[1].rows == 0);
}

TEST(CrossComponents, StyleAlignedAppendsFullAnchorBlocks) {
    Rng rng(15);
    Fixture f = two_image_fixture();
    AttentionState state = make_state(rng, 2, 4, 3);
    SchemeSpec spec{Scheme::style_aligned, {0}};
    const InterventionContext ctx = f.ctx(low_res_layer(), 8, true);
    for (int i = 0; i < 2; ++i) cross_components(spec, state, ctx, i);
    ASSERT_EQ(state.k_ext[1].rows, 8);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c) {
            ASSERT_EQ(state.k_ext[1].at(r, c), state.k[1].at(r, c));
            ASSERT_EQ(state.k_ext[1].at(4 + r, c), state.k[0].at(r, c));
            ASSERT_EQ(state.v_ext[1].at(4 + r, c), state.v[0].at(r, c));
        }
    // the anchor keeps its plain dictionary
    EXPECT_EQ(state.k_ext[0].rows, 0);
}

TEST(CrossComponents, ConsistyleRespectsTogglesAndResolution) {
    Rng rng(16);
    Fixture f = two_image_fixture();
    SchemeSpec spec{Scheme::consistyle, {0}};

    AttentionState state = make_state(rng, 2, 4, 3);
    Toggles off;
    off.crossing = false;
    cross_components(spec, state, f.ctx(high_res_layer(), 3, true, off), 1);
    EXPECT_TRUE(state.k_ext[1].rows == 0);

    cross_components(spec, state, f.ctx(low_res_layer(), 3, true), 1);
    EXPECT_TRUE(state.k_ext[1].rows == 0);

    cross_components(spec, state, f.ctx(high_res_layer(), 3, true), 1);
    EXPECT_EQ(state.k_ext[1].rows, 4 + 2); // own rows + anchor subject rows
    EXPECT_EQ(state.keys_for(1).rows, 6);
    EXPECT_EQ(state.keys_for(0).rows, 4); // untouched image falls back to its plain keys
}

TEST(SchemeProcessorDrive, CrossingReadsPostModificationTensors) {
    Rng rng(17);
    Fixture f = two_image_fixture();
    ValueStore store("dec0.self", 2, 5);
    const Mat u0 = random_mat(rng, 4, 3), c0 = random_mat(rng, 4, 3);
    const Mat u1 = random_mat(rng, 4, 3), c1 = random_mat(rng, 4, 3);
    store.record(3, "dec0.self", 0, u0, c0);
    store.record(3, "dec0.self", 1, u1, c1);

    SchemeProcessor proc;
    proc.spec = {Scheme::consistyle, {0}};
    proc.qk_window = {2, 5};
    proc.vsd_window = {2, 5};
    proc.masks = f.masks;
    proc.corr = f.corr;
    proc.store = &store;

    AttentionState state = make_state(rng, 2, 4, 3);
    proc.on_attention(state, high_res_layer(), 3, 10, true);

    // values were swapped for the recorded ones before any crossing ran, so
    // image 0's imported block derives from the recorded V_1, not the live one
    EXPECT_TRUE(state.v[0].bitwise_equal(c0));
    EXPECT_TRUE(state.v[1].bitwise_equal(c1));
    const int s1[] = {0, 3};
    const Mat expected = adain(select_rows(c1, s1), c0);
    ASSERT_EQ(state.v_ext[0].rows, 6);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) ASSERT_EQ(state.v_ext[0].at(4 + r, c), expected.at(r, c));
}

TEST(HiddenScheme, ConsistoryRewritesSubjectRowsFromTheAnchor) {
    Rng rng(18);
    Fixture f = two_image_fixture();
    std::vector<Mat> hidden;
    hidden.push_back(random_mat(rng, 4, 3));
    hidden.push_back(random_mat(rng, 4, 3));
    const std::vector<Mat> before = hidden;
    SchemeSpec spec{Scheme::consistory, {0}};
    const InterventionContext ctx = f.ctx(high_res_layer(), 3, true);
    for (int i = 0; i < 2; ++i) apply_hidden_scheme(spec, hidden, ctx, i);
    for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(hidden[1].at(0, c), before[0].at(2, c));
        EXPECT_EQ(hidden[1].at(3, c), before[0].at(1, c));
        EXPECT_EQ(hidden[1].at(1, c), before[1].at(1, c));
    }
    EXPECT_TRUE(hidden[0].bitwise_equal(before[0]));

    // other schemes leave hidden states alone
    std::vector<Mat> untouched = before;
    SchemeSpec csty{Scheme::consistyle, {0}};
    for (int i = 0; i < 2; ++i) apply_hidden_scheme(csty, untouched, ctx, i);
    EXPECT_TRUE(untouched[1].bitwise_equal(before[1]));

    // consistory without a correspondence is a wiring bug
    Fixture broken = two_image_fixture();
    broken.corr[1] = nullptr;
    EXPECT_THROW(apply_hidden_scheme(spec, hidden, broken.ctx(high_res_layer(), 3, true), 1), std::runtime_error);
}

TEST(LatentScheme, CrossImageRenormalizesNonAnchorLatents) {
    Rng rng(19);
    std::vector<Mat> latents;
    latents.push_back(random_mat(rng, 16, 4));
    latents.push_back(random_mat(rng, 16, 4));
    for (auto& v : latents[1].data) v = v * 4.0f + 1.0f;
    const std::vector<Mat> before = latents;

    SchemeSpec spec{Scheme::cross_image, {0}};
    apply_latent_scheme(spec, latents, 3);
    EXPECT_TRUE(latents[0].bitwise_equal(before[0]));
    const Mat expected = adain(before[1], before[0]);
    EXPECT_TRUE(latents[1].bitwise_equal(expected));

    // every other scheme leaves latents alone
    std::vector<Mat> copy = before;
    apply_latent_scheme(SchemeSpec{Scheme::consistyle, {0}}, copy, 3);
    EXPECT_TRUE(copy[1].bitwise_equal(before[1]));
}
