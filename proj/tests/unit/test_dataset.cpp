#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "refanim/dataset.hpp"
#include "refanim/image.hpp"
#include "refanim/rng.hpp"

using namespace refanim;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
    std::string p = (fs::temp_directory_path() / ("refanim_test_" + tag)).string();
    fs::remove_all(p);
    return p;
}

double bone_len(const Skeleton3D& sk, int b) {
    auto [j0, j1] = bone_joints()[static_cast<size_t>(b)];
    const Vec3& a = sk.joints[static_cast<size_t>(j0)];
    const Vec3& c = sk.joints[static_cast<size_t>(j1)];
    double dx = a.x - c.x, dy = a.y - c.y, dz = a.z - c.z;
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace

TEST_CASE("identity sampling is deterministic and separates colors") {
    IdentitySpec a = sample_identity(0);
    IdentitySpec b = sample_identity(0);
    CHECK(a.limb_colors == b.limb_colors);
    CHECK(a.limb_widths == b.limb_widths);
    CHECK(a.head_radius == b.head_radius);

    // Brute-force channel separation across a realistic identity range.
    for (uint64_t s1 = 0; s1 < 24; ++s1)
        for (uint64_t s2 = s1 + 1; s2 < 24; ++s2) {
            IdentitySpec x = sample_identity(s1), y = sample_identity(s2);
            float best = 0;
            for (int g = 0; g < kNumLimbGroups; ++g)
                for (int c = 0; c < 3; ++c)
                    best = std::max(best,
                                    std::fabs(x.limb_colors[(size_t)g][(size_t)c] -
                                              y.limb_colors[(size_t)g][(size_t)c]));
            CAPTURE(s1);
            CAPTURE(s2);
            CHECK(best > 0.05f);
        }

    for (int g = 0; g < kNumLimbGroups; ++g) {
        CHECK(a.limb_widths[(size_t)g] > 0);
        for (int c = 0; c < 3; ++c) {
            CHECK(a.limb_colors[(size_t)g][(size_t)c] >= 0.0f);
            CHECK(a.limb_colors[(size_t)g][(size_t)c] <= 1.0f);
        }
    }
    CHECK(a.head_radius > 0);
}

TEST_CASE("motion: smoothness, constant bone lengths, determinism") {
    IdentitySpec id = sample_identity(3);
    CHECK_THROWS_AS(synthesize_motion(id, 1, 0), std::invalid_argument);
    CHECK(synthesize_motion(id, 1, 1).size() == 1);

    for (uint64_t seed : {0ull, 7ull, 123456789ull}) {
        auto seq = synthesize_motion(id, seed, 24);
        REQUIRE(seq.size() == 24);
        // displacement oracle: max per-joint inter-frame movement
        double max_disp = 0;
        for (size_t f = 1; f < seq.size(); ++f)
            for (int j = 0; j < kNumJoints; ++j) {
                const Vec3& p = seq[f - 1].joints[(size_t)j];
                const Vec3& q = seq[f].joints[(size_t)j];
                double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
                max_disp = std::max(max_disp, std::sqrt(dx * dx + dy * dy + dz * dz));
            }
        CAPTURE(seed);
        CHECK(max_disp < 0.05);

        // bone lengths constant across frames (and equal across seeds)
        for (int b = 0; b < kNumBones; ++b) {
            double l0 = bone_len(seq[0], b);
            for (const auto& sk : seq) CHECK(std::fabs(bone_len(sk, b) - l0) < 1e-6);
        }
    }

    auto s1 = synthesize_motion(id, 42, 8);
    auto s2 = synthesize_motion(id, 42, 8);
    for (size_t f = 0; f < s1.size(); ++f)
        for (int j = 0; j < kNumJoints; ++j) {
            CHECK(s1[f].joints[(size_t)j].x == s2[f].joints[(size_t)j].x);
            CHECK(s1[f].joints[(size_t)j].y == s2[f].joints[(size_t)j].y);
            CHECK(s1[f].joints[(size_t)j].z == s2[f].joints[(size_t)j].z);
        }
}

TEST_CASE("projection: full body visible at zoom 1, ankles gone at closeup") {
    IdentitySpec id = sample_identity(1);
    auto seq = synthesize_motion(id, 5, 1);

    CameraSpec full;
    full.zoom = 1.0;
    full.shot_type = shot_type_for_zoom(full.zoom);
    Skeleton2D sk_full = project_skeleton(seq[0], full);
    for (int j = 0; j < kNumJoints; ++j) CHECK(sk_full.visible[(size_t)j]);

    CameraSpec close;
    close.zoom = 2.5;
    close.shot_type = shot_type_for_zoom(close.zoom);
    // center the crop on the projected head position
    Skeleton2D at_full = project_skeleton(seq[0], full);
    close.crop_center = at_full.joints[0];
    Skeleton2D sk_close = project_skeleton(seq[0], close);
    CHECK_FALSE(sk_close.visible[12]);
    CHECK_FALSE(sk_close.visible[13]);
    CHECK(sk_close.visible[0]);
}

TEST_CASE("render: determinism, bounds, resolution validation") {
    IdentitySpec id = sample_identity(2);
    auto seq = synthesize_motion(id, 9, 1);
    CameraSpec cam;
    cam.zoom = 1.1;
    cam.shot_type = shot_type_for_zoom(cam.zoom);

    CHECK_THROWS_AS(project_and_render(id, seq[0], cam, 48), std::invalid_argument);

    RenderResult a = project_and_render(id, seq[0], cam, 64);
    RenderResult b = project_and_render(id, seq[0], cam, 64);
    CHECK(max_abs_diff(a.frame, b.frame) == 0.0f);
    CHECK(max_abs_diff(a.pose_map, b.pose_map) == 0.0f);
    CHECK(a.frame.shape == std::vector<long>{3, 64, 64});
    for (long i = 0; i < a.frame.numel(); ++i) {
        CHECK(a.frame[i] >= 0.0f);
        CHECK(a.frame[i] <= 1.0f);
    }
    // pose map has colored bones on black: some pixels on, corners black
    CHECK(a.pose_map.at(0, 0, 0) == 0.0f);
    float mx = 0;
    for (long i = 0; i < a.pose_map.numel(); ++i) mx = std::max(mx, a.pose_map[i]);
    CHECK(mx > 0.5f);
}

TEST_CASE("shot type thresholds") {
    CHECK(shot_type_for_zoom(1.0) == ShotType::full);
    CHECK(shot_type_for_zoom(1.29) == ShotType::full);
    CHECK(shot_type_for_zoom(1.3) == ShotType::medium);
    CHECK(shot_type_for_zoom(2.19) == ShotType::medium);
    CHECK(shot_type_for_zoom(2.2) == ShotType::closeup);
    CHECK(shot_type_for_zoom(3.0) == ShotType::closeup);
}

TEST_CASE("png round trip is lossless on quantized images") {
    Rng rng(77);
    TensorF img = TensorF::rand_uniform({3, 20, 17}, rng, 0.0f, 1.0f);
    quantize8(img);
    std::string dir = temp_dir("png");
    fs::create_directories(dir);
    write_png(dir + "/x.png", img);
    TensorF back = read_png(dir + "/x.png");
    CHECK(back.shape == img.shape);
    CHECK(max_abs_diff(back, img) == 0.0f);
    fs::remove_all(dir);
}

TEST_CASE("build_dataset: counts, split, coverage") {
    DatasetConfig cfg;
    cfg.identities = 16;
    cfg.shots_per_id = 6;
    cfg.frames_per_shot = 24;
    cfg.resolution = 32;
    cfg.train_ratio = 0.75;
    cfg.seed = 11;
    std::string dir = temp_dir("counts");
    DatasetManifest m = build_dataset(cfg, dir);

    CHECK(m.identities.size() == 16);
    CHECK(m.total_shots() == 96);
    CHECK(m.total_frames() == 2304);
    CHECK(m.train_ids.size() == 12);
    CHECK(m.test_ids.size() == 4);
    std::set<std::string> train(m.train_ids.begin(), m.train_ids.end());
    for (const auto& id : m.test_ids) CHECK(train.count(id) == 0);

    // Coverage: every identity has all three shot types.
    for (const auto& info : m.identities) {
        std::set<ShotType> types;
        for (const auto& s : info.shots) types.insert(s.camera.shot_type);
        CHECK(types.size() == 3);
    }

    // Manifest counts match files on disk.
    long files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.path().extension() == ".png") ++files;
    CHECK(files == 2304);
    fs::remove_all(dir);
}

TEST_CASE("dataset round trip: disk reproduces the in-memory render exactly") {
    DatasetConfig cfg;
    cfg.identities = 3;
    cfg.shots_per_id = 3;
    cfg.frames_per_shot = 5;
    cfg.resolution = 64;
    cfg.seed = 4;
    std::string dir = temp_dir("roundtrip");
    DatasetManifest built = build_dataset(cfg, dir);
    DatasetManifest loaded = load_manifest(dir);

    CHECK(loaded.identities.size() == built.identities.size());
    CHECK(loaded.train_ids == built.train_ids);
    CHECK(loaded.test_ids == built.test_ids);
    CHECK(loaded.config.resolution == built.config.resolution);

    const IdentityInfo& info = loaded.identity("id_001");
    const ShotInfo& shot = info.shots[2];
    IdentitySpec spec = sample_identity(info.identity_seed);
    auto skels = synthesize_motion(spec, shot.motion_seed, shot.num_frames);
    RenderResult r = project_and_render(spec, skels[3], shot.camera, cfg.resolution);

    TensorF frame = read_png(frame_path(loaded, "id_001", shot.shot_id, 3));
    CHECK(max_abs_diff(frame, r.frame) == 0.0f);

    Skeleton2D sk = load_skeleton2d(pose_json_path(loaded, "id_001", shot.shot_id, 3));
    TensorF pm = render_pose_map(sk, cfg.resolution);
    CHECK(max_abs_diff(pm, r.pose_map) == 0.0f);

    CHECK_THROWS_AS(loaded.identity("nope"), std::out_of_range);
    fs::remove_all(dir);
}

TEST_CASE("load_sample: determinism, diversity, validation") {
    DatasetConfig cfg;
    cfg.identities = 2;
    cfg.shots_per_id = 3;  // one of each shot type
    cfg.frames_per_shot = 6;
    cfg.resolution = 32;
    cfg.seed = 9;
    std::string dir = temp_dir("sample");
    DatasetManifest m = build_dataset(cfg, dir);

    TrainingSample s1 = load_sample(m, "id_000", 2, 3, 555);
    TrainingSample s2 = load_sample(m, "id_000", 2, 3, 555);
    CHECK(s1.target_shot_id == s2.target_shot_id);
    CHECK(s1.target_start == s2.target_start);
    REQUIRE(s1.ref_images.size() == 2);
    REQUIRE(s1.tgt_frames.size() == 3);
    for (size_t i = 0; i < 2; ++i)
        CHECK(max_abs_diff(s1.ref_images[i], s2.ref_images[i]) == 0.0f);

    CHECK_THROWS_AS(load_sample(m, "ghost", 1, 1, 0), std::out_of_range);
    CHECK_THROWS_AS(load_sample(m, "id_000", 1000, 1, 0), std::invalid_argument);
    CHECK_THROWS_AS(load_sample(m, "id_000", 1, 0, 0), std::invalid_argument);
    CHECK_THROWS_AS(load_sample(m, "id_000", 1, 99, 0), std::invalid_argument);
    CHECK(load_sample(m, "id_000", 1, 1, 3).ref_images.size() == 1);
    fs::remove_all(dir);
}

TEST_CASE("load_sample: diversity rule picks one ref per available shot type") {
    // 6 shots cycling full/medium/closeup; whichever shot is the target, the
    // pool still contains all three types, and refs never use the target shot.
    DatasetConfig cfg;
    cfg.identities = 1;
    cfg.shots_per_id = 6;
    cfg.frames_per_shot = 4;
    cfg.resolution = 32;
    cfg.seed = 2;
    std::string dir = temp_dir("diversity");
    DatasetManifest m = build_dataset(cfg, dir);

    for (uint64_t seed = 0; seed < 40; ++seed) {
        TrainingSample s = load_sample(m, "id_000", 2, 2, seed);
        REQUIRE(s.ref_sources.size() == 2);
        // cap of ceil(2/2)=1 per type: the two refs have different types
        CHECK(s.ref_sources[0].shot_type != s.ref_sources[1].shot_type);
        for (const auto& src : s.ref_sources) CHECK(src.shot_id != s.target_shot_id);
        // without replacement
        CHECK((s.ref_sources[0].shot_id != s.ref_sources[1].shot_id ||
               s.ref_sources[0].frame != s.ref_sources[1].frame));
    }

    // Larger draws respect the per-type cap ceil(4/2)=2.
    for (uint64_t seed = 0; seed < 20; ++seed) {
        TrainingSample s = load_sample(m, "id_000", 4, 1, seed);
        std::array<int, 3> count{0, 0, 0};
        for (const auto& src : s.ref_sources) ++count[(size_t)src.shot_type];
        for (int c : count) CHECK(c <= 2);
    }
    fs::remove_all(dir);
}
