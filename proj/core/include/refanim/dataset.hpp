#pragma once

// Procedural multi-shot articulated-figure dataset: deterministic identity
// sampling, kinematic motion synthesis, orthographic projection with
// crop-zoom cameras, capsule rasterization, and on-disk round trip.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "refanim/tensor.hpp"

namespace refanim {

inline constexpr int kNumJoints = 14;
inline constexpr int kNumBones = 13;
inline constexpr int kNumLimbGroups = 10;

// Joint order is fixed and serialized into dataset metadata.
const std::array<const char*, kNumJoints>& joint_names();
// Bone j connects joints bone_joints()[j] = {parent, child}.
const std::array<std::array<int, 2>, kNumBones>& bone_joints();
// Maps each bone to its limb color/width group.
const std::array<int, kNumBones>& bone_group();
// Fixed distinct per-bone palette used by pose maps (identity-independent).
const std::array<std::array<float, 3>, kNumBones>& bone_palette();

struct Vec3 {
    double x = 0, y = 0, z = 0;
};
struct Vec2 {
    double x = 0, y = 0;
};

struct IdentitySpec {
    std::string identity_id;
    std::array<std::array<float, 3>, kNumLimbGroups> limb_colors{};
    std::array<float, kNumLimbGroups> limb_widths{};
    float head_radius = 0;
    uint64_t torso_texture_seed = 0;
};

enum class ShotType { full, medium, closeup };

const char* shot_type_name(ShotType t);
ShotType shot_type_from_name(const std::string& s);
ShotType shot_type_for_zoom(double zoom);

struct CameraSpec {
    double yaw = 0;    // radians in [-pi, pi]
    double pitch = 0;  // radians in [-pi/4, pi/4]
    double zoom = 1.0;
    Vec2 crop_center{0.5, 0.5};
    ShotType shot_type = ShotType::full;
};

struct Skeleton3D {
    std::array<Vec3, kNumJoints> joints{};
};

struct Skeleton2D {
    std::array<Vec2, kNumJoints> joints{};  // normalized [0,1] when visible
    std::array<bool, kNumJoints> visible{};
};

// Channel-first float images [3,R,R] in [0,1].
struct RenderResult {
    TensorF frame;
    TensorF pose_map;
    Skeleton2D skeleton2d;
};

IdentitySpec sample_identity(uint64_t seed);
std::vector<Skeleton3D> synthesize_motion(const IdentitySpec& identity, uint64_t motion_seed,
                                          int num_frames);
RenderResult project_and_render(const IdentitySpec& identity, const Skeleton3D& skeleton,
                                const CameraSpec& camera, int resolution);

// Projects without rasterizing; used by tests and by the renderer itself.
Skeleton2D project_skeleton(const Skeleton3D& skeleton, const CameraSpec& camera);

// Pose maps are identity-independent functions of the 2D skeleton, so loaders
// can re-render them bit-identically from the stored per-frame joint JSON.
TensorF render_pose_map(const Skeleton2D& skeleton2d, int resolution);

struct DatasetConfig {
    int identities = 8;
    int shots_per_id = 4;
    int frames_per_shot = 24;
    int resolution = 64;
    double train_ratio = 0.75;
    uint64_t seed = 0;
};

struct ShotInfo {
    std::string shot_id;
    CameraSpec camera;
    int num_frames = 0;
    uint64_t motion_seed = 0;  // persisted so renders are reproducible
};

struct IdentityInfo {
    std::string identity_id;
    uint64_t identity_seed = 0;
    std::vector<ShotInfo> shots;
};

struct DatasetManifest {
    std::string root;
    int schema_version = 1;
    DatasetConfig config;
    std::vector<IdentityInfo> identities;
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;

    const IdentityInfo& identity(const std::string& id) const;  // throws out_of_range
    long total_shots() const;
    long total_frames() const;
};

DatasetManifest build_dataset(const DatasetConfig& config, const std::string& out_dir);
DatasetManifest load_manifest(const std::string& root);

struct RefSource {
    std::string shot_id;
    long frame = 0;
    ShotType shot_type = ShotType::full;
};

struct TrainingSample {
    std::vector<TensorF> ref_images;  // N x [3,H,W]
    std::vector<TensorF> ref_poses;
    std::vector<TensorF> tgt_frames;  // T x [3,H,W]
    std::vector<TensorF> tgt_poses;
    std::vector<RefSource> ref_sources;  // provenance, parallel to ref_images
    std::string identity_id;
    std::string target_shot_id;
    long target_start = 0;
};

TrainingSample load_sample(const DatasetManifest& dataset, const std::string& identity_id,
                           int ref_count, int window, uint64_t seed);

// Frame/pose paths inside a dataset tree (used by loaders and tests).
std::string frame_path(const DatasetManifest& m, const std::string& identity_id,
                       const std::string& shot_id, long frame);
std::string pose_json_path(const DatasetManifest& m, const std::string& identity_id,
                           const std::string& shot_id, long frame);

Skeleton2D load_skeleton2d(const std::string& json_path);

}  // namespace refanim
