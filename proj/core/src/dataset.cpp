#include "refanim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "refanim/image.hpp"
#include "refanim/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace refanim {

// ------------------------------------------------------------------ schema

const std::array<const char*, kNumJoints>& joint_names() {
    static const std::array<const char*, kNumJoints> names = {
        "head",    "neck",    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist",
        "r_wrist", "l_hip",   "r_hip",      "l_knee",     "r_knee",  "l_ankle", "r_ankle"};
    return names;
}

const std::array<std::array<int, 2>, kNumBones>& bone_joints() {
    static const std::array<std::array<int, 2>, kNumBones> bones = {{{1, 0},
                                                                     {1, 2},
                                                                     {1, 3},
                                                                     {2, 4},
                                                                     {3, 5},
                                                                     {4, 6},
                                                                     {5, 7},
                                                                     {1, 8},
                                                                     {1, 9},
                                                                     {8, 10},
                                                                     {9, 11},
                                                                     {10, 12},
                                                                     {11, 13}}};
    return bones;
}

const std::array<int, kNumBones>& bone_group() {
    // head, torso x4, upper arms, forearms, thighs, shins
    static const std::array<int, kNumBones> groups = {0, 1, 1, 2, 3, 4, 5, 1, 1, 6, 7, 8, 9};
    return groups;
}

const std::array<std::array<float, 3>, kNumBones>& bone_palette() {
    static const std::array<std::array<float, 3>, kNumBones> pal = {{
        {1.00f, 0.00f, 0.00f},  // head-neck
        {1.00f, 0.55f, 0.00f},  // neck-l_shoulder
        {1.00f, 1.00f, 0.00f},  // neck-r_shoulder
        {0.55f, 1.00f, 0.00f},  // l upper arm
        {0.00f, 1.00f, 0.00f},  // r upper arm
        {0.00f, 1.00f, 0.55f},  // l forearm
        {0.00f, 1.00f, 1.00f},  // r forearm
        {0.00f, 0.55f, 1.00f},  // neck-l_hip
        {0.00f, 0.00f, 1.00f},  // neck-r_hip
        {0.55f, 0.00f, 1.00f},  // l thigh
        {1.00f, 0.00f, 1.00f},  // r thigh
        {1.00f, 0.00f, 0.55f},  // l shin
        {1.00f, 1.00f, 1.00f},  // r shin
    }};
    return pal;
}

const char* shot_type_name(ShotType t) {
    switch (t) {
        case ShotType::full: return "full";
        case ShotType::medium: return "medium";
        case ShotType::closeup: return "closeup";
    }
    throw std::logic_error("shot_type_name: bad enum");
}

ShotType shot_type_from_name(const std::string& s) {
    if (s == "full") return ShotType::full;
    if (s == "medium") return ShotType::medium;
    if (s == "closeup") return ShotType::closeup;
    throw std::invalid_argument("unknown shot type: " + s);
}

ShotType shot_type_for_zoom(double zoom) {
    if (zoom < 1.3) return ShotType::full;
    if (zoom < 2.2) return ShotType::medium;
    return ShotType::closeup;
}

// ---------------------------------------------------------------- identity

namespace {

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c, g = x;
    } else if (hp < 2) {
        r = x, g = c;
    } else if (hp < 3) {
        g = c, b = x;
    } else if (hp < 4) {
        g = x, b = c;
    } else if (hp < 5) {
        r = x, b = c;
    } else {
        r = c, b = x;
    }
    double m = v - c;
    return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

}  // namespace

IdentitySpec sample_identity(uint64_t seed) {
    IdentitySpec id;
    id.identity_id = "seed_" + std::to_string(seed);
    id.torso_texture_seed = derive_seed(seed, {0xB6});

    // Base color from a 12x2x2 lattice indexed directly by seed: sequential
    // seeds land in distinct cells (up to 48 identities), and neighboring
    // cells differ by > 0.05 in at least one RGB channel by construction.
    uint64_t cell = seed % 48;
    double hue = static_cast<double>(cell % 12) / 12.0;
    double val = (cell / 12) % 2 == 0 ? 0.55 : 0.82;
    double sat = (cell / 24) % 2 == 0 ? 0.65 : 0.95;
    Rng rng(derive_seed(seed, {0x1D}));
    double hue_jitter = (rng.uniform() - 0.5) * 0.02;

    for (int g = 0; g < kNumLimbGroups; ++g) {
        // Head carries the separation guarantee; other groups orbit the base
        // hue with seeded offsets for visual variety.
        double gh = hue + hue_jitter + (g == 0 ? 0.0 : 0.13 * g + 0.08 * rng.uniform());
        double gs = g == 0 ? sat : std::clamp(sat + (rng.uniform() - 0.5) * 0.2, 0.45, 1.0);
        double gv = g == 0 ? val : std::clamp(val + (rng.uniform() - 0.5) * 0.2, 0.4, 0.95);
        id.limb_colors[static_cast<size_t>(g)] = hsv_to_rgb(gh, gs, gv);
    }

    static const std::array<float, kNumLimbGroups> base_w = {
        0.040f, 0.070f, 0.022f, 0.022f, 0.018f, 0.018f, 0.030f, 0.030f, 0.024f, 0.024f};
    for (int g = 0; g < kNumLimbGroups; ++g)
        id.limb_widths[static_cast<size_t>(g)] =
            base_w[static_cast<size_t>(g)] * static_cast<float>(0.88 + 0.24 * rng.uniform());
    id.head_radius = 0.055f * static_cast<float>(0.9 + 0.2 * rng.uniform());
    return id;
}

// ------------------------------------------------------------------ motion

namespace {

// Skeleton geometry in canonical canvas units, y up, pelvis at the origin.
constexpr double kTorsoLen = 0.34;
constexpr double kNeckHead = 0.11;
constexpr double kShoulderX = 0.115;
constexpr double kShoulderY = -0.015;
constexpr double kHipX = 0.065;
constexpr double kUpperArm = 0.16;
constexpr double kForeArm = 0.15;
constexpr double kThigh = 0.20;
constexpr double kShin = 0.19;

Vec3 rot_z(const Vec3& v, double a) {
    double c = std::cos(a), s = std::sin(a);
    return {c * v.x - s * v.y, s * v.x + c * v.y, v.z};
}
Vec3 rot_x(const Vec3& v, double a) {
    double c = std::cos(a), s = std::sin(a);
    return {v.x, c * v.y - s * v.z, s * v.y + c * v.z};
}
Vec3 rot_y(const Vec3& v, double a) {
    double c = std::cos(a), s = std::sin(a);
    return {c * v.x + s * v.z, v.y, -s * v.x + c * v.z};
}
Vec3 add(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }

// One sinusoidal track: amplitude bounded per track (keeps the figure in
// frame), frequency derived from a per-frame step budget (keeps trajectories
// smooth for every seed: |delta per frame| <= amp * 2*pi*freq <= max_step).
struct AngleOsc {
    double offset = 0, amp = 0, freq = 0, phase = 0;
    double eval(double t) const { return offset + amp * std::sin(2.0 * M_PI * freq * t + phase); }
};

AngleOsc draw_osc(Rng& rng, double max_step, double max_amp, double max_offset) {
    AngleOsc o;
    o.amp = max_amp * (0.25 + 0.75 * rng.uniform());
    double step = max_step * (0.55 + 0.45 * rng.uniform());
    o.freq = step / (2.0 * M_PI * o.amp);
    o.offset = (rng.uniform() * 2.0 - 1.0) * max_offset;
    o.phase = rng.uniform() * 2.0 * M_PI;
    return o;
}

struct MotionProgram {
    AngleOsc torso_lean_z, torso_lean_x, torso_twist_y, head_nod;
    std::array<AngleOsc, 2> arm_swing_z, arm_swing_x, elbow_bend;
    std::array<AngleOsc, 2> leg_swing_x, knee_bend;
    AngleOsc root_x, root_y, root_z;
};

MotionProgram draw_motion(uint64_t motion_seed) {
    Rng rng(derive_seed(motion_seed, {0x30}));
    MotionProgram m;
    m.torso_lean_z = draw_osc(rng, 0.008, 0.10, 0.05);
    m.torso_lean_x = draw_osc(rng, 0.008, 0.10, 0.05);
    m.torso_twist_y = draw_osc(rng, 0.010, 0.25, 0.20);
    m.head_nod = draw_osc(rng, 0.025, 0.15, 0.10);
    for (int s = 0; s < 2; ++s) {
        m.arm_swing_z[s] = draw_osc(rng, 0.028, 0.35, 0.25);
        m.arm_swing_x[s] = draw_osc(rng, 0.028, 0.30, 0.20);
        m.elbow_bend[s] = draw_osc(rng, 0.030, 0.30, 0.15);
        m.leg_swing_x[s] = draw_osc(rng, 0.018, 0.12, 0.08);
        m.knee_bend[s] = draw_osc(rng, 0.020, 0.10, 0.05);
    }
    m.root_x = draw_osc(rng, 0.0015, 0.015, 0.01);
    m.root_y = draw_osc(rng, 0.0015, 0.015, 0.01);
    m.root_z = draw_osc(rng, 0.0015, 0.015, 0.01);
    return m;
}

Skeleton3D pose_at(const MotionProgram& m, double t) {
    Skeleton3D sk;
    Vec3 root{m.root_x.eval(t), m.root_y.eval(t), m.root_z.eval(t)};
    double lz = m.torso_lean_z.eval(t), lx = m.torso_lean_x.eval(t), ty = m.torso_twist_y.eval(t);
    auto torso = [&](const Vec3& v) { return rot_x(rot_z(rot_y(v, ty), lz), lx); };

    Vec3 neck = add(root, torso({0, kTorsoLen, 0}));
    Vec3 head = add(neck, torso(rot_x({0, kNeckHead, 0}, m.head_nod.eval(t))));
    sk.joints[0] = head;
    sk.joints[1] = neck;

    for (int s = 0; s < 2; ++s) {  // 0 = left, 1 = right
        double side = s == 0 ? -1.0 : 1.0;
        Vec3 sh = add(neck, torso({side * kShoulderX, kShoulderY, 0}));
        double az = side * m.arm_swing_z[static_cast<size_t>(s)].eval(t);
        double ax = m.arm_swing_x[static_cast<size_t>(s)].eval(t);
        Vec3 ua = torso(rot_z(rot_x({0, -kUpperArm, 0}, ax), az));
        Vec3 el = add(sh, ua);
        double bend = 0.35 + m.elbow_bend[static_cast<size_t>(s)].eval(t);
        Vec3 fa = torso(rot_z(rot_x({0, -kForeArm, 0}, ax + side * 0.1), az + side * bend));
        Vec3 wr = add(el, fa);
        sk.joints[static_cast<size_t>(2 + s)] = sh;
        sk.joints[static_cast<size_t>(4 + s)] = el;
        sk.joints[static_cast<size_t>(6 + s)] = wr;

        Vec3 hip = add(root, torso({side * kHipX, 0, 0}));
        double gx = m.leg_swing_x[static_cast<size_t>(s)].eval(t);
        Vec3 th = rot_x({0, -kThigh, 0}, gx);
        Vec3 kn = add(hip, th);
        double kb = 0.12 + m.knee_bend[static_cast<size_t>(s)].eval(t);
        Vec3 sn = rot_x({0, -kShin, 0}, gx - kb);
        Vec3 an = add(kn, sn);
        sk.joints[static_cast<size_t>(8 + s)] = hip;
        sk.joints[static_cast<size_t>(10 + s)] = kn;
        sk.joints[static_cast<size_t>(12 + s)] = an;
    }
    return sk;
}

}  // namespace

std::vector<Skeleton3D> synthesize_motion(const IdentitySpec& identity, uint64_t motion_seed,
                                          int num_frames) {
    if (num_frames < 1) throw std::invalid_argument("synthesize_motion: num_frames < 1");
    (void)identity;  // bone lengths are canonical; identity varies appearance only
    MotionProgram m = draw_motion(motion_seed);
    std::vector<Skeleton3D> out;
    out.reserve(static_cast<size_t>(num_frames));
    for (int f = 0; f < num_frames; ++f) out.push_back(pose_at(m, static_cast<double>(f)));
    return out;
}

// -------------------------------------------------------------- projection

namespace {

constexpr double kProjScale = 0.8;
constexpr double kProjCenterV = 0.58;
constexpr double kPitchPivotY = 0.15;

Vec2 to_canvas(const Vec3& j, const CameraSpec& cam) {
    Vec3 p = rot_y(j, cam.yaw);
    p.y -= kPitchPivotY;
    p = rot_x(p, cam.pitch);
    p.y += kPitchPivotY;
    return {0.5 + kProjScale * p.x, kProjCenterV - kProjScale * p.y};
}

Vec2 canvas_to_crop(const Vec2& p, const CameraSpec& cam) {
    return {(p.x - cam.crop_center.x) * cam.zoom + 0.5,
            (p.y - cam.crop_center.y) * cam.zoom + 0.5};
}

}  // namespace

Skeleton2D project_skeleton(const Skeleton3D& skeleton, const CameraSpec& camera) {
    Skeleton2D out;
    for (int j = 0; j < kNumJoints; ++j) {
        Vec2 q = canvas_to_crop(to_canvas(skeleton.joints[static_cast<size_t>(j)], camera),
                                camera);
        out.joints[static_cast<size_t>(j)] = q;
        out.visible[static_cast<size_t>(j)] =
            q.x >= 0.0 && q.x <= 1.0 && q.y >= 0.0 && q.y <= 1.0;
    }
    return out;
}

// ------------------------------------------------------------- rasterizer

namespace {

struct Capsule {
    Vec2 a, b;      // endpoints in crop space
    double radius;  // crop space
    std::array<float, 3> color;
};

double capsule_sdist(const Vec2& p, const Capsule& c) {
    double abx = c.b.x - c.a.x, aby = c.b.y - c.a.y;
    double apx = p.x - c.a.x, apy = p.y - c.a.y;
    double len2 = abx * abx + aby * aby;
    double t = len2 > 0 ? std::clamp((apx * abx + apy * aby) / len2, 0.0, 1.0) : 0.0;
    double dx = apx - t * abx, dy = apy - t * aby;
    return std::sqrt(dx * dx + dy * dy) - c.radius;
}

// Paints capsules over an existing background with a one-pixel soft edge.
// Ties resolve to the capsule whose surface the pixel is deepest inside.
void paint_capsules(TensorF& img, const std::vector<Capsule>& caps, int res) {
    double px = 1.0 / res;
    // Per-pixel winner selection keeps overlap handling order-independent.
    std::vector<double> best(static_cast<size_t>(res) * static_cast<size_t>(res),
                             std::numeric_limits<double>::infinity());
    std::vector<int> who(static_cast<size_t>(res) * static_cast<size_t>(res), -1);
    for (size_t k = 0; k < caps.size(); ++k) {
        const Capsule& c = caps[k];
        long i0 = std::max(0L, static_cast<long>(std::floor(
                                   (std::min(c.a.y, c.b.y) - c.radius - px) * res)));
        long i1 = std::min(static_cast<long>(res) - 1,
                           static_cast<long>(
                               std::ceil((std::max(c.a.y, c.b.y) + c.radius + px) * res)));
        long j0 = std::max(0L, static_cast<long>(std::floor(
                                   (std::min(c.a.x, c.b.x) - c.radius - px) * res)));
        long j1 = std::min(static_cast<long>(res) - 1,
                           static_cast<long>(
                               std::ceil((std::max(c.a.x, c.b.x) + c.radius + px) * res)));
        for (long i = i0; i <= i1; ++i)
            for (long j = j0; j <= j1; ++j) {
                Vec2 p{(j + 0.5) * px, (i + 0.5) * px};
                double d = capsule_sdist(p, c);
                size_t off = static_cast<size_t>(i * res + j);
                if (d < best[off]) {
                    best[off] = d;
                    who[off] = static_cast<int>(k);
                }
            }
    }
    for (long i = 0; i < res; ++i)
        for (long j = 0; j < res; ++j) {
            size_t off = static_cast<size_t>(i * res + j);
            if (who[off] < 0) continue;
            double alpha = std::clamp(0.5 - best[off] / px, 0.0, 1.0);
            if (alpha <= 0.0) continue;
            const auto& col = caps[static_cast<size_t>(who[off])].color;
            for (long ch = 0; ch < 3; ++ch) {
                float& dst = img.at(ch, i, j);
                dst = static_cast<float>((1.0 - alpha) * dst + alpha * col[static_cast<size_t>(ch)]);
            }
        }
}

void fill_background(TensorF& img, const IdentitySpec& identity, const CameraSpec& cam, int res) {
    Rng rng(identity.torso_texture_seed);
    double hue = rng.uniform();
    auto base = hsv_to_rgb(hue, 0.25 + 0.2 * rng.uniform(), 0.12 + 0.1 * rng.uniform());
    double fx = 0.5 + 1.5 * rng.uniform(), fy = 0.5 + 1.5 * rng.uniform();
    double ph = rng.uniform() * 2.0 * M_PI;
    for (long i = 0; i < res; ++i)
        for (long j = 0; j < res; ++j) {
            // Evaluate in full-canvas coordinates so zooming magnifies the
            // same underlying backdrop.
            Vec2 q{(j + 0.5) / res, (i + 0.5) / res};
            double cx = cam.crop_center.x + (q.x - 0.5) / cam.zoom;
            double cy = cam.crop_center.y + (q.y - 0.5) / cam.zoom;
            double w = 0.85 + 0.15 * std::sin(2.0 * M_PI * (fx * cx + fy * cy) + ph);
            for (long ch = 0; ch < 3; ++ch)
                img.at(ch, i, j) = static_cast<float>(base[static_cast<size_t>(ch)] * w);
        }
}

}  // namespace

TensorF render_pose_map(const Skeleton2D& skeleton2d, int resolution) {
    TensorF img = TensorF::zeros({3, resolution, resolution});
    std::vector<Capsule> caps;
    caps.reserve(kNumBones);
    for (int b = 0; b < kNumBones; ++b) {
        auto [j0, j1] = bone_joints()[static_cast<size_t>(b)];
        Capsule c;
        c.a = skeleton2d.joints[static_cast<size_t>(j0)];
        c.b = skeleton2d.joints[static_cast<size_t>(j1)];
        c.radius = 0.016;
        c.color = bone_palette()[static_cast<size_t>(b)];
        caps.push_back(c);
    }
    paint_capsules(img, caps, resolution);
    quantize8(img);
    return img;
}

RenderResult project_and_render(const IdentitySpec& identity, const Skeleton3D& skeleton,
                                const CameraSpec& camera, int resolution) {
    if (resolution != 32 && resolution != 64 && resolution != 128)
        throw std::invalid_argument("project_and_render: resolution must be 32, 64 or 128");

    RenderResult out;
    out.skeleton2d = project_skeleton(skeleton, camera);

    out.frame = TensorF({3, resolution, resolution});
    fill_background(out.frame, identity, camera, resolution);

    std::vector<Capsule> caps;
    caps.reserve(kNumBones + 1);
    for (int b = 0; b < kNumBones; ++b) {
        auto [j0, j1] = bone_joints()[static_cast<size_t>(b)];
        int g = bone_group()[static_cast<size_t>(b)];
        Capsule c;
        c.a = out.skeleton2d.joints[static_cast<size_t>(j0)];
        c.b = out.skeleton2d.joints[static_cast<size_t>(j1)];
        c.radius = identity.limb_widths[static_cast<size_t>(g)] * camera.zoom;
        c.color = identity.limb_colors[static_cast<size_t>(g)];
        caps.push_back(c);
    }
    Capsule head;
    head.a = head.b = out.skeleton2d.joints[0];
    head.radius = identity.head_radius * camera.zoom;
    head.color = identity.limb_colors[0];
    caps.push_back(head);
    paint_capsules(out.frame, caps, resolution);
    quantize8(out.frame);

    out.pose_map = render_pose_map(out.skeleton2d, resolution);
    return out;
}

// ----------------------------------------------------------------- dataset

namespace {

std::string identity_name(int idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "id_%03d", idx);
    return buf;
}
std::string shot_name(int idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "shot_%02d", idx);
    return buf;
}
std::string frame_name(long idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06ld", idx);
    return buf;
}

CameraSpec sample_camera(uint64_t dataset_seed, int id_idx, int shot_idx) {
    Rng rng(derive_seed(dataset_seed, {0xCA, static_cast<uint64_t>(id_idx),
                                      static_cast<uint64_t>(shot_idx)}));
    CameraSpec cam;
    // First three shots cycle the shot types so every identity covers all of
    // them; later shots roam the full zoom range.
    switch (shot_idx % 3) {
        case 0: cam.zoom = 0.85 + 0.40 * rng.uniform(); break;
        case 1: cam.zoom = 1.35 + 0.75 * rng.uniform(); break;
        default: cam.zoom = 2.25 + 0.75 * rng.uniform(); break;
    }
    cam.yaw = (rng.uniform() * 2.0 - 1.0) * 0.7;
    cam.pitch = (rng.uniform() * 2.0 - 1.0) * 0.35;
    double t = std::clamp((cam.zoom - 1.0) / 1.6, 0.0, 1.0);
    cam.crop_center.x = 0.5 + (rng.uniform() * 2.0 - 1.0) * 0.04 * t;
    cam.crop_center.y = 0.5 + (0.24 - 0.5) * t + (rng.uniform() * 2.0 - 1.0) * 0.03 * t;
    if (cam.zoom > 1.0) {
        double half = 0.5 / cam.zoom;
        cam.crop_center.x = std::clamp(cam.crop_center.x, half, 1.0 - half);
        cam.crop_center.y = std::clamp(cam.crop_center.y, half, 1.0 - half);
    }
    cam.shot_type = shot_type_for_zoom(cam.zoom);
    return cam;
}

json camera_to_json(const CameraSpec& c) {
    return json{{"yaw", c.yaw},
                {"pitch", c.pitch},
                {"zoom", c.zoom},
                {"crop_center", {c.crop_center.x, c.crop_center.y}},
                {"shot_type", shot_type_name(c.shot_type)}};
}

CameraSpec camera_from_json(const json& j) {
    CameraSpec c;
    c.yaw = j.at("yaw").get<double>();
    c.pitch = j.at("pitch").get<double>();
    c.zoom = j.at("zoom").get<double>();
    c.crop_center.x = j.at("crop_center")[0].get<double>();
    c.crop_center.y = j.at("crop_center")[1].get<double>();
    c.shot_type = shot_type_from_name(j.at("shot_type").get<std::string>());
    return c;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << j.dump(1) << "\n";
}

json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    return json::parse(is);
}

uint64_t identity_seed_for(const DatasetConfig& cfg, int idx) {
    // Sequential within a dataset so the identity-color separation lattice
    // applies; offset by the dataset seed to decorrelate datasets.
    return cfg.seed * 4096 + static_cast<uint64_t>(idx);
}

}  // namespace

const IdentityInfo& DatasetManifest::identity(const std::string& id) const {
    for (const auto& info : identities)
        if (info.identity_id == id) return info;
    throw std::out_of_range("unknown identity: " + id);
}

long DatasetManifest::total_shots() const {
    long n = 0;
    for (const auto& id : identities) n += static_cast<long>(id.shots.size());
    return n;
}

long DatasetManifest::total_frames() const {
    long n = 0;
    for (const auto& id : identities)
        for (const auto& s : id.shots) n += s.num_frames;
    return n;
}

std::string frame_path(const DatasetManifest& m, const std::string& identity_id,
                       const std::string& shot_id, long frame) {
    return m.root + "/identities/" + identity_id + "/shots/" + shot_id + "/frames/" +
           frame_name(frame) + ".png";
}

std::string pose_json_path(const DatasetManifest& m, const std::string& identity_id,
                           const std::string& shot_id, long frame) {
    return m.root + "/identities/" + identity_id + "/shots/" + shot_id + "/poses/" +
           frame_name(frame) + ".json";
}

Skeleton2D load_skeleton2d(const std::string& json_path) {
    json j = read_json_file(json_path);
    if (!j.is_array() || j.size() != kNumJoints)
        throw std::runtime_error("bad pose json: " + json_path);
    Skeleton2D sk;
    for (int i = 0; i < kNumJoints; ++i) {
        sk.joints[static_cast<size_t>(i)].x = j[static_cast<size_t>(i)][0].get<double>();
        sk.joints[static_cast<size_t>(i)].y = j[static_cast<size_t>(i)][1].get<double>();
        sk.visible[static_cast<size_t>(i)] = j[static_cast<size_t>(i)][2].get<bool>();
    }
    return sk;
}

DatasetManifest build_dataset(const DatasetConfig& config, const std::string& out_dir) {
    if (config.identities < 1 || config.shots_per_id < 1 || config.frames_per_shot < 1)
        throw std::invalid_argument("build_dataset: counts must be >= 1");

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw std::runtime_error("build_dataset: cannot create " + out_dir);

    DatasetManifest m;
    m.root = out_dir;
    m.config = config;

    for (int i = 0; i < config.identities; ++i) {
        uint64_t iseed = identity_seed_for(config, i);
        IdentitySpec spec = sample_identity(iseed);
        IdentityInfo info;
        info.identity_id = identity_name(i);
        info.identity_seed = iseed;

        for (int s = 0; s < config.shots_per_id; ++s) {
            ShotInfo shot;
            shot.shot_id = shot_name(s);
            shot.camera = sample_camera(config.seed, i, s);
            shot.num_frames = config.frames_per_shot;
            shot.motion_seed = derive_seed(config.seed, {0x40, static_cast<uint64_t>(i),
                                                         static_cast<uint64_t>(s)});

            std::string shot_dir =
                out_dir + "/identities/" + info.identity_id + "/shots/" + shot.shot_id;
            fs::create_directories(shot_dir + "/frames");
            fs::create_directories(shot_dir + "/poses");
            json cj = camera_to_json(shot.camera);
            cj["motion_seed"] = shot.motion_seed;
            write_json_file(shot_dir + "/camera.json", cj);

            auto skels = synthesize_motion(spec, shot.motion_seed, config.frames_per_shot);
            for (int f = 0; f < config.frames_per_shot; ++f) {
                RenderResult r = project_and_render(spec, skels[static_cast<size_t>(f)],
                                                    shot.camera, config.resolution);
                write_png(shot_dir + "/frames/" + frame_name(f) + ".png", r.frame);
                json pj = json::array();
                for (int jt = 0; jt < kNumJoints; ++jt)
                    pj.push_back({r.skeleton2d.joints[static_cast<size_t>(jt)].x,
                                  r.skeleton2d.joints[static_cast<size_t>(jt)].y,
                                  r.skeleton2d.visible[static_cast<size_t>(jt)]});
                write_json_file(shot_dir + "/poses/" + frame_name(f) + ".json", pj);
            }
            info.shots.push_back(std::move(shot));
        }
        m.identities.push_back(std::move(info));
    }

    // Disjoint identity-level split via a seeded shuffle.
    std::vector<std::string> ids;
    for (const auto& info : m.identities) ids.push_back(info.identity_id);
    Rng srng(derive_seed(config.seed, {0x5F}));
    for (size_t i = ids.size(); i > 1; --i)
        std::swap(ids[i - 1], ids[static_cast<size_t>(srng.uniform_int(0, static_cast<int>(i) - 1))]);
    long n_train = std::lround(config.train_ratio * static_cast<double>(ids.size()));
    n_train = std::clamp(n_train, 0L, static_cast<long>(ids.size()));
    m.train_ids.assign(ids.begin(), ids.begin() + n_train);
    m.test_ids.assign(ids.begin() + n_train, ids.end());
    std::sort(m.train_ids.begin(), m.train_ids.end());
    std::sort(m.test_ids.begin(), m.test_ids.end());

    json meta;
    meta["schema_version"] = m.schema_version;
    meta["joint_order"] = json::array();
    for (const char* n : joint_names()) meta["joint_order"].push_back(n);
    meta["config"] = {{"identities", config.identities},
                      {"shots_per_id", config.shots_per_id},
                      {"frames_per_shot", config.frames_per_shot},
                      {"resolution", config.resolution},
                      {"train_ratio", config.train_ratio},
                      {"seed", config.seed}};
    meta["split"] = {{"train", m.train_ids}, {"test", m.test_ids}};
    json jids = json::array();
    for (const auto& info : m.identities) {
        json ji;
        ji["identity_id"] = info.identity_id;
        ji["identity_seed"] = info.identity_seed;
        json js = json::array();
        for (const auto& s : info.shots)
            js.push_back({{"shot_id", s.shot_id}, {"num_frames", s.num_frames}});
        ji["shots"] = js;
        jids.push_back(ji);
    }
    meta["identities"] = jids;
    write_json_file(out_dir + "/meta.json", meta);
    return m;
}

DatasetManifest load_manifest(const std::string& root) {
    json meta = read_json_file(root + "/meta.json");
    DatasetManifest m;
    m.root = root;
    m.schema_version = meta.at("schema_version").get<int>();
    const json& jc = meta.at("config");
    m.config.identities = jc.at("identities").get<int>();
    m.config.shots_per_id = jc.at("shots_per_id").get<int>();
    m.config.frames_per_shot = jc.at("frames_per_shot").get<int>();
    m.config.resolution = jc.at("resolution").get<int>();
    m.config.train_ratio = jc.at("train_ratio").get<double>();
    m.config.seed = jc.at("seed").get<uint64_t>();
    m.train_ids = meta.at("split").at("train").get<std::vector<std::string>>();
    m.test_ids = meta.at("split").at("test").get<std::vector<std::string>>();
    for (const json& ji : meta.at("identities")) {
        IdentityInfo info;
        info.identity_id = ji.at("identity_id").get<std::string>();
        info.identity_seed = ji.at("identity_seed").get<uint64_t>();
        for (const json& js : ji.at("shots")) {
            ShotInfo s;
            s.shot_id = js.at("shot_id").get<std::string>();
            s.num_frames = js.at("num_frames").get<int>();
            json cj = read_json_file(root + "/identities/" + info.identity_id + "/shots/" +
                                     s.shot_id + "/camera.json");
            s.camera = camera_from_json(cj);
            s.motion_seed = cj.value("motion_seed", 0ull);
            info.shots.push_back(std::move(s));
        }
        m.identities.push_back(std::move(info));
    }
    return m;
}

// ------------------------------------------------------------- load_sample

TrainingSample load_sample(const DatasetManifest& dataset, const std::string& identity_id,
                           int ref_count, int window, uint64_t seed) {
    if (ref_count < 1) throw std::invalid_argument("load_sample: ref_count < 1");
    if (window < 1) throw std::invalid_argument("load_sample: window < 1");
    const IdentityInfo& info = dataset.identity(identity_id);

    Rng rng(derive_seed(seed, {0xF00D}));
    int S = static_cast<int>(info.shots.size());
    int tgt_shot = rng.uniform_int(0, S - 1);
    const ShotInfo& tgt = info.shots[static_cast<size_t>(tgt_shot)];
    if (window > tgt.num_frames)
        throw std::invalid_argument("load_sample: window exceeds shot length");
    long start = rng.uniform_int(0, static_cast<int>(tgt.num_frames - window));

    // Reference pool: frames of non-target shots when the identity has more
    // than one shot, otherwise frames of the (single) target shot.
    struct Cand {
        int shot;
        long frame;
    };
    std::array<std::vector<Cand>, 3> by_type;  // indexed by ShotType
    long pool = 0;
    for (int s = 0; s < S; ++s) {
        if (S > 1 && s == tgt_shot) continue;
        const ShotInfo& sh = info.shots[static_cast<size_t>(s)];
        auto& bucket = by_type[static_cast<size_t>(sh.camera.shot_type)];
        for (long f = 0; f < sh.num_frames; ++f) bucket.push_back({s, f});
        pool += sh.num_frames;
    }
    if (ref_count > pool) throw std::invalid_argument("load_sample: ref_count exceeds pool");

    int types_present = 0;
    for (const auto& b : by_type) types_present += b.empty() ? 0 : 1;
    long cap = types_present > 1 ? (ref_count + 1) / 2 : ref_count;

    std::vector<Cand> chosen;
    std::array<long, 3> taken{0, 0, 0};
    while (static_cast<long>(chosen.size()) < ref_count) {
        bool progressed = false;
        for (size_t ty = 0; ty < 3 && static_cast<long>(chosen.size()) < ref_count; ++ty) {
            auto& bucket = by_type[ty];
            if (bucket.empty() || taken[ty] >= cap) continue;
            size_t pick = static_cast<size_t>(
                rng.uniform_int(0, static_cast<int>(bucket.size()) - 1));
            chosen.push_back(bucket[pick]);
            bucket.erase(bucket.begin() + static_cast<long>(pick));
            ++taken[ty];
            progressed = true;
        }
        if (!progressed) {
            // Every remaining type is capped; lift the cap to finish.
            cap = std::numeric_limits<long>::max();
        }
    }

    TrainingSample out;
    out.identity_id = identity_id;
    out.target_shot_id = tgt.shot_id;
    out.target_start = start;
    int res = dataset.config.resolution;
    for (const Cand& c : chosen) {
        const ShotInfo& sh = info.shots[static_cast<size_t>(c.shot)];
        out.ref_images.push_back(read_png(frame_path(dataset, identity_id, sh.shot_id, c.frame)));
        out.ref_poses.push_back(render_pose_map(
            load_skeleton2d(pose_json_path(dataset, identity_id, sh.shot_id, c.frame)), res));
        out.ref_sources.push_back({sh.shot_id, c.frame, sh.camera.shot_type});
    }
    for (long f = start; f < start + window; ++f) {
        out.tgt_frames.push_back(read_png(frame_path(dataset, identity_id, tgt.shot_id, f)));
        out.tgt_poses.push_back(render_pose_map(
            load_skeleton2d(pose_json_path(dataset, identity_id, tgt.shot_id, f)), res));
    }
    return out;
}

}  // namespace refanim
