#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dmdetr/head.hpp"
#include "dmdetr/rng.hpp"
#include "dmdetr/tensor.hpp"
#include "json.hpp"

namespace dmdetr {

// Vocabulary: fixed ids so token streams are stable across runs.
// 0 pad, 1 "the", 2-5 colors, 6-8 shapes, 9-12 relations.
namespace vocab {
inline constexpr int pad = 0;
inline constexpr int the = 1;
inline constexpr int color_base = 2;   // red, green, blue, yellow
inline constexpr int shape_base = 6;   // circle, square, triangle
inline constexpr int rel_base = 9;     // left-of, right-of, above, below
inline constexpr int size = 13;
}  // namespace vocab

enum class ShapeKind { circle = 0, square = 1, triangle = 2 };
enum class ColorKind { red = 0, green = 1, blue = 2, yellow = 3 };
enum class Relation { left_of = 0, right_of = 1, above = 2, below = 3 };

struct SceneObject {
    ShapeKind shape;
    ColorKind color;
    double cx, cy, size;  // normalized; size is the bounding-square side
};

struct SceneSpec {
    std::vector<SceneObject> objects;
};

struct Expression {
    std::vector<int> tokens;  // padded to N_l
    Mask mask;
};

struct Example {
    std::vector<double> raster;  // side x side x 3, row-major, values in [0,1]
    Expression expr;
    Box box;  // ground truth, tight bound of the referent
};

struct DataConfig {
    int side = 64;
    int n_l = 8;
    int min_objects = 2;
    int max_objects = 4;
    double relation_prob = 0.5;
    double min_size = 0.16;
    double max_size = 0.26;
    double min_center_dist = 0.3;  // > max_size, so rendered objects never overlap
};

// Relations use a 0.1 margin so near-ties never appear; y grows downward.
inline bool relation_holds(Relation r, const SceneObject& a, const SceneObject& b) {
    switch (r) {
        case Relation::left_of: return a.cx < b.cx - 0.1;
        case Relation::right_of: return a.cx > b.cx + 0.1;
        case Relation::above: return a.cy < b.cy - 0.1;
        case Relation::below: return a.cy > b.cy + 0.1;
    }
    return false;
}

// Parsed form of the two expression shapes:
//   [the color shape]                          — attribute
//   [the colorA shapeA rel the colorB shapeB]  — relational
struct ParsedExpr {
    int color_a, shape_a;
    bool relational = false;
    Relation rel{};
    int color_b = -1, shape_b = -1;
};

inline ParsedExpr parse_expression(const std::vector<int>& tokens, const Mask& mask) {
    int n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) n += (mask[i] != 0);
    ParsedExpr e;
    if (n != 3 && n != 7) throw DataError("expression: unsupported length " + std::to_string(n));
    e.color_a = tokens[1] - vocab::color_base;
    e.shape_a = tokens[2] - vocab::shape_base;
    if (n == 7) {
        e.relational = true;
        e.rel = static_cast<Relation>(tokens[3] - vocab::rel_base);
        e.color_b = tokens[5] - vocab::color_base;
        e.shape_b = tokens[6] - vocab::shape_base;
    }
    return e;
}

inline bool matches_attr(const SceneObject& o, int color, int shape) {
    return static_cast<int>(o.color) == color && static_cast<int>(o.shape) == shape;
}

// Which objects satisfy the expression; uniqueness means exactly one survivor.
inline std::vector<int> satisfying_objects(const SceneSpec& scene, const ParsedExpr& e) {
    std::vector<int> hits;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        const SceneObject& a = scene.objects[i];
        if (!matches_attr(a, e.color_a, e.shape_a)) continue;
        if (!e.relational) {
            hits.push_back(static_cast<int>(i));
            continue;
        }
        for (std::size_t j = 0; j < scene.objects.size(); ++j) {
            if (j == i) continue;
            const SceneObject& b = scene.objects[j];
            if (matches_attr(b, e.color_b, e.shape_b) && relation_holds(e.rel, a, b)) {
                hits.push_back(static_cast<int>(i));
                break;
            }
        }
    }
    return hits;
}

inline bool inside_shape(const SceneObject& o, double x, double y) {
    double dx = x - o.cx, dy = y - o.cy, half = o.size / 2;
    switch (o.shape) {
        case ShapeKind::circle: return dx * dx + dy * dy <= half * half;
        case ShapeKind::square: return std::abs(dx) <= half && std::abs(dy) <= half;
        case ShapeKind::triangle: {
            // apex at the top, base at the bottom of the bounding square
            double from_apex = dy + half;  // 0 at apex, size at base
            if (from_apex < 0 || from_apex > o.size) return false;
            return std::abs(dx) <= from_apex / 2;
        }
    }
    return false;
}

// Hard-edged rendering by pixel-center inside tests on a black background.
inline std::vector<double> render(const SceneSpec& scene, int side) {
    static const double rgb[4][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};
    std::vector<double> raster(static_cast<std::size_t>(side) * side * 3, 0.0);
    for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px) {
            double x = (px + 0.5) / side, y = (py + 0.5) / side;
            for (const SceneObject& o : scene.objects) {
                if (!inside_shape(o, x, y)) continue;
                double* p = raster.data() + (static_cast<std::size_t>(py) * side + px) * 3;
                const double* c = rgb[static_cast<int>(o.color)];
                p[0] = c[0];
                p[1] = c[1];
                p[2] = c[2];
                break;  // objects are disjoint by construction
            }
        }
    return raster;
}

inline SceneSpec generate_scene(SeededRng& rng, const DataConfig& cfg) {
    for (int scene_attempt = 0; scene_attempt < 50; ++scene_attempt) {
        SceneSpec scene;
        int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
        bool ok = true;
        for (int i = 0; i < count && ok; ++i) {
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                SceneObject o;
                o.shape = static_cast<ShapeKind>(rng.uniform_int(0, 2));
                o.color = static_cast<ColorKind>(rng.uniform_int(0, 3));
                o.size = rng.uniform(cfg.min_size, cfg.max_size);
                double half = o.size / 2;
                o.cx = rng.uniform(0.05 + half, 0.95 - half);
                o.cy = rng.uniform(0.05 + half, 0.95 - half);
                bool clear = true;
                for (const SceneObject& other : scene.objects) {
                    double dx = o.cx - other.cx, dy = o.cy - other.cy;
                    if (dx * dx + dy * dy < cfg.min_center_dist * cfg.min_center_dist)
                        clear = false;
                }
                if (clear) {
                    scene.objects.push_back(o);
                    placed = true;
                }
            }
            ok = placed;
        }
        if (ok) return scene;
    }
    throw DataError("scene generation: constraints unsatisfiable after 50 scene attempts");
}

inline Expression build_expression(const std::vector<int>& body, int n_l) {
    if (static_cast<int>(body.size()) > n_l)
        throw DataError("expression body of " + std::to_string(body.size()) +
                        " tokens exceeds N_l=" + std::to_string(n_l));
    Expression e;
    e.tokens = body;
    e.tokens.resize(static_cast<std::size_t>(n_l), vocab::pad);
    e.mask.assign(static_cast<std::size_t>(n_l), 0);
    for (std::size_t i = 0; i < body.size(); ++i) e.mask[i] = 1;
    return e;
}

// One example, fully determined by its own rng stream. Retries scene and
// expression candidates until the referent is provably unique.
inline Example generate_example(SeededRng rng, const DataConfig& cfg) {
    for (int attempt = 0; attempt < 200; ++attempt) {
        SceneSpec scene = generate_scene(rng, cfg);
        int referent = rng.uniform_int(0, static_cast<int>(scene.objects.size()) - 1);
        const SceneObject& a = scene.objects[static_cast<std::size_t>(referent)];
        std::vector<int> body;
        bool want_relation = rng.bernoulli(cfg.relation_prob);
        if (want_relation && scene.objects.size() >= 2) {
            int anchor = rng.uniform_int(0, static_cast<int>(scene.objects.size()) - 1);
            if (anchor != referent) {
                const SceneObject& b = scene.objects[static_cast<std::size_t>(anchor)];
                Relation rel = static_cast<Relation>(rng.uniform_int(0, 3));
                if (relation_holds(rel, a, b)) {
                    body = {vocab::the, vocab::color_base + static_cast<int>(a.color),
                            vocab::shape_base + static_cast<int>(a.shape),
                            vocab::rel_base + static_cast<int>(rel), vocab::the,
                            vocab::color_base + static_cast<int>(b.color),
                            vocab::shape_base + static_cast<int>(b.shape)};
                }
            }
        }
        if (body.empty())
            body = {vocab::the, vocab::color_base + static_cast<int>(a.color),
                    vocab::shape_base + static_cast<int>(a.shape)};
        Expression expr = build_expression(body, cfg.n_l);
        std::vector<int> hits = satisfying_objects(scene, parse_expression(expr.tokens, expr.mask));
        if (hits.size() != 1 || hits[0] != referent) continue;
        Example ex;
        ex.raster = render(scene, cfg.side);
        ex.expr = std::move(expr);
        ex.box = {a.cx, a.cy, a.size, a.size};
        return ex;
    }
    throw DataError("example generation: no unique referent after 200 attempts");
}

// Deterministic stream: example i depends only on (seed, i, config).
inline std::vector<Example> generate(std::uint64_t seed, int count, const DataConfig& cfg) {
    if (count < 1) throw DataError("generate: count must be >= 1");
    std::vector<Example> out;
    out.reserve(static_cast<std::size_t>(count));
    SeededRng base(seed);
    for (int i = 0; i < count; ++i)
        out.push_back(generate_example(base.fork(static_cast<std::uint64_t>(i)), cfg));
    return out;
}

// Disjoint split seeds derived from one run seed.
inline std::uint64_t split_seed(std::uint64_t seed, const std::string& split) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a over the split name
    for (char ch : split) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ull;
    }
    return SeededRng(seed).fork(h).seed();
}

inline void export_jsonl(const std::vector<Example>& examples, const std::string& path,
                         bool raster_sidecar = false) {
    std::ofstream out(path);
    if (!out) throw DataError("export: cannot open " + path);
    std::ofstream raw;
    std::string sidecar = path + ".f32";
    std::uint64_t offset = 0;
    if (raster_sidecar) {
        raw.open(sidecar, std::ios::binary);
        if (!raw) throw DataError("export: cannot open " + sidecar);
    }
    for (const Example& ex : examples) {
        nlohmann::json j;
        j["tokens"] = ex.expr.tokens;
        j["mask"] = std::vector<int>(ex.expr.mask.begin(), ex.expr.mask.end());
        j["box"] = {ex.box.cx, ex.box.cy, ex.box.w, ex.box.h};
        if (raster_sidecar) {
            std::vector<float> f(ex.raster.begin(), ex.raster.end());
            raw.write(reinterpret_cast<const char*>(f.data()),
                      static_cast<std::streamsize>(f.size() * sizeof(float)));
            j["raster_ref"] = {{"file", sidecar}, {"offset", offset}, {"count", f.size()}};
            offset += f.size() * sizeof(float);
        } else {
            j["raster"] = ex.raster;
        }
        out << j.dump() << "\n";
    }
}

inline std::vector<Example> import_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("import: cannot open " + path);
    std::vector<Example> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("import: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        try {
            Example ex;
            ex.expr.tokens = j.at("tokens").get<std::vector<int>>();
            auto m = j.at("mask").get<std::vector<int>>();
            ex.expr.mask.assign(m.begin(), m.end());
            auto b = j.at("box").get<std::vector<double>>();
            if (b.size() != 4) throw DataError("box needs 4 fields");
            for (double v : b)
                if (v < 0.0 || v > 1.0) throw DataError("box field outside [0,1]");
            ex.box = {b[0], b[1], b[2], b[3]};
            if (j.contains("raster_ref")) {
                const auto& ref = j.at("raster_ref");
                std::ifstream raw(ref.at("file").get<std::string>(), std::ios::binary);
                if (!raw) throw DataError("missing sidecar " + ref.at("file").get<std::string>());
                raw.seekg(static_cast<std::streamoff>(ref.at("offset").get<std::uint64_t>()));
                std::vector<float> f(ref.at("count").get<std::size_t>());
                raw.read(reinterpret_cast<char*>(f.data()),
                         static_cast<std::streamsize>(f.size() * sizeof(float)));
                if (!raw) throw DataError("short read from sidecar");
                ex.raster.assign(f.begin(), f.end());
            } else {
                ex.raster = j.at("raster").get<std::vector<double>>();
            }
            out.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("import: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError("import: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace dmdetr
