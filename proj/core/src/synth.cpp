#include "bridgediff/data.hpp"

#include <algorithm>
#include <cmath>

namespace bridgediff {

namespace {

// grayscale canvas with coverage-based anti-aliased strokes
struct Canvas {
    int res;
    std::vector<float> px;

    Canvas(int r, float background) : res(r), px(static_cast<size_t>(r * r), background) {}

    void blend(int x, int y, float value, float alpha) {
        if (x < 0 || x >= res || y < 0 || y >= res || alpha <= 0) return;
        float& p = px[static_cast<size_t>(y * res + x)];
        p = p * (1.0f - alpha) + value * alpha;
    }

    void line(double x0, double y0, double x1, double y1, float value, double width = 1.0) {
        double hw = width * 0.5;
        int minx = static_cast<int>(std::floor(std::min(x0, x1) - hw - 1));
        int maxx = static_cast<int>(std::ceil(std::max(x0, x1) + hw + 1));
        int miny = static_cast<int>(std::floor(std::min(y0, y1) - hw - 1));
        int maxy = static_cast<int>(std::ceil(std::max(y0, y1) + hw + 1));
        double dx = x1 - x0, dy = y1 - y0;
        double len2 = dx * dx + dy * dy;
        for (int y = miny; y <= maxy; ++y) {
            for (int x = minx; x <= maxx; ++x) {
                double px_ = x + 0.5, py_ = y + 0.5;
                double t = len2 > 0 ? ((px_ - x0) * dx + (py_ - y0) * dy) / len2 : 0.0;
                t = std::clamp(t, 0.0, 1.0);
                double cx = x0 + t * dx, cy = y0 + t * dy;
                double d = std::hypot(px_ - cx, py_ - cy);
                double a = std::clamp(hw + 0.5 - d, 0.0, 1.0);
                blend(x, y, value, static_cast<float>(a));
            }
        }
    }

    void polyline(const std::vector<std::pair<double, double>>& pts, float value,
                  double width = 1.0) {
        for (size_t i = 0; i + 1 < pts.size(); ++i) {
            line(pts[i].first, pts[i].second, pts[i + 1].first, pts[i + 1].second, value, width);
        }
    }

    Tensor to_tensor() const {
        Tensor t = Tensor::zeros({res, res, 3});
        float* d = t.data_f32();
        for (int i = 0; i < res * res; ++i) {
            float v = std::clamp(px[static_cast<size_t>(i)], 0.0f, 1.0f);
            d[i * 3 + 0] = v;
            d[i * 3 + 1] = v;
            d[i * 3 + 2] = v;
        }
        return t;
    }
};

struct Scene {
    double x0, x1, deck_y, ground_y;
    float ink;
    double w;  // stroke width
};

void draw_deck(Canvas& c, const Scene& s) {
    c.line(s.x0, s.deck_y, s.x1, s.deck_y, s.ink, s.w);
    c.line(s.x0, s.deck_y + 1.4, s.x1, s.deck_y + 1.4, s.ink, s.w * 0.8);
    // abutments
    c.line(s.x0, s.deck_y, s.x0, s.ground_y, s.ink, s.w);
    c.line(s.x1, s.deck_y, s.x1, s.ground_y, s.ink, s.w);
}

std::vector<std::pair<double, double>> arch_curve(const Scene& s, double rise, int segs,
                                                  double lobe_amp = 0.0, int lobe_count = 0) {
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i <= segs; ++i) {
        double t = static_cast<double>(i) / segs;
        double x = s.x0 + (s.x1 - s.x0) * t;
        double u = 2.0 * t - 1.0;
        double y = s.deck_y - rise * std::sqrt(std::max(0.0, 1.0 - u * u));
        if (lobe_count > 0) {
            y -= lobe_amp * std::abs(std::sin(lobe_count * M_PI * t)) *
                 std::sqrt(std::max(0.0, 1.0 - u * u));
        }
        pts.emplace_back(x, y);
    }
    return pts;
}

void draw_arch(Canvas& c, const Scene& s, RngStream& rng) {
    double rise = (0.18 + 0.10 * rng.uniform()) * c.res;
    auto curve = arch_curve(s, rise, 40);
    c.polyline(curve, s.ink, s.w);
    int hangers = 4 + static_cast<int>(rng.uniform_int(3));
    for (int i = 1; i <= hangers; ++i) {
        double t = static_cast<double>(i) / (hangers + 1);
        double x = s.x0 + (s.x1 - s.x0) * t;
        double u = 2.0 * t - 1.0;
        double y = s.deck_y - rise * std::sqrt(std::max(0.0, 1.0 - u * u));
        c.line(x, y, x, s.deck_y, s.ink, s.w * 0.7);
    }
}

void draw_truss(Canvas& c, const Scene& s, RngStream& rng) {
    double h = (0.10 + 0.08 * rng.uniform()) * c.res;
    double top = s.deck_y - h;
    c.line(s.x0, top, s.x1, top, s.ink, s.w);
    int panels = 4 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i <= panels; ++i) {
        double x = s.x0 + (s.x1 - s.x0) * i / panels;
        c.line(x, top, x, s.deck_y, s.ink, s.w * 0.8);
    }
    for (int i = 0; i < panels; ++i) {
        double xa = s.x0 + (s.x1 - s.x0) * i / panels;
        double xb = s.x0 + (s.x1 - s.x0) * (i + 1) / panels;
        if (i % 2 == 0) {
            c.line(xa, s.deck_y, xb, top, s.ink, s.w * 0.8);
        } else {
            c.line(xa, top, xb, s.deck_y, s.ink, s.w * 0.8);
        }
    }
}

void draw_suspension(Canvas& c, const Scene& s, RngStream& rng) {
    double th = (0.22 + 0.10 * rng.uniform()) * c.res;
    double span = s.x1 - s.x0;
    double ta = s.x0 + 0.25 * span, tb = s.x0 + 0.75 * span;
    double top = s.deck_y - th;
    c.line(ta, s.deck_y + 2, ta, top, s.ink, s.w);
    c.line(tb, s.deck_y + 2, tb, top, s.ink, s.w);
    // main-span parabola: tower tops sagging toward the deck at midspan
    double sag = 0.75 * th;
    std::vector<std::pair<double, double>> cable;
    int segs = 30;
    for (int i = 0; i <= segs; ++i) {
        double t = static_cast<double>(i) / segs;
        double x = ta + (tb - ta) * t;
        double u = 2.0 * t - 1.0;
        cable.emplace_back(x, top + sag * (1.0 - u * u));
    }
    c.polyline(cable, s.ink, s.w * 0.9);
    c.line(s.x0, s.deck_y, ta, top, s.ink, s.w * 0.8);  // side spans
    c.line(tb, top, s.x1, s.deck_y, s.ink, s.w * 0.8);
    int hangers = 5;
    for (int i = 1; i < hangers; ++i) {
        double t = static_cast<double>(i) / hangers;
        double x = ta + (tb - ta) * t;
        double u = 2.0 * t - 1.0;
        c.line(x, top + sag * (1.0 - u * u), x, s.deck_y, s.ink, s.w * 0.6);
    }
}

void draw_coral(Canvas& c, const Scene& s, RngStream& rng) {
    // the held-out target style: a lobed double arch, heavier ink
    double rise = (0.22 + 0.10 * rng.uniform()) * c.res;
    int lobes = 6 + static_cast<int>(rng.uniform_int(4));
    double amp = (0.04 + 0.03 * rng.uniform()) * c.res;
    auto outer = arch_curve(s, rise, 64, amp, lobes);
    auto inner = arch_curve(s, rise * 0.72, 48);
    c.polyline(outer, s.ink, s.w * 1.2);
    c.polyline(inner, s.ink, s.w);
    int ribs = 6 + static_cast<int>(rng.uniform_int(3));
    for (int i = 1; i <= ribs; ++i) {
        double t = static_cast<double>(i) / (ribs + 1);
        double u = 2.0 * t - 1.0;
        double x = s.x0 + (s.x1 - s.x0) * t;
        double yo = s.deck_y - (rise + amp * std::abs(std::sin(lobes * M_PI * t))) *
                                   std::sqrt(std::max(0.0, 1.0 - u * u));
        c.line(x, yo, x, s.deck_y, s.ink, s.w * 0.6);
    }
}

std::vector<std::string> style_tags(BridgeStyle style, RngStream& rng) {
    std::vector<std::string> tags = {"bridge"};
    switch (style) {
        case BridgeStyle::Arch:
            tags.insert(tags.end(), {"outdoors", "water", "scenery"});
            break;
        case BridgeStyle::Truss:
            tags.insert(tags.end(), {"outdoors", "road", "car"});
            break;
        case BridgeStyle::Suspension:
            tags.insert(tags.end(), {"outdoors", "water", "sky", "cloud"});
            break;
        case BridgeStyle::Coral:
            tags.insert(tags.end(), {"outdoors", "scenery", "sky"});
            break;
    }
    const char* extras[] = {"day", "tree", "building"};
    for (const char* e : extras) {
        if (rng.uniform() < 0.5) tags.push_back(e);
    }
    return tags;
}

}  // namespace

Corpus synth_bridges(int n, BridgeStyle style, int resolution, RngStream& rng) {
    BD_CHECK(n >= 1, "synth_bridges: need n >= 1, got {}", n);
    BD_CHECK(resolution >= 16, "synth_bridges: resolution {} too small", resolution);
    Corpus corpus;
    for (int i = 0; i < n; ++i) {
        RngStream r = rng.split(static_cast<uint64_t>(i) + 1);
        float bg = static_cast<float>(0.80 + 0.13 * r.uniform());
        Canvas canvas(resolution, bg);
        Scene s;
        double margin = (0.06 + 0.06 * r.uniform()) * resolution;
        s.x0 = margin;
        s.x1 = resolution - margin;
        s.deck_y = (0.52 + 0.10 * r.uniform()) * resolution;
        s.ground_y = 0.92 * resolution;
        s.ink = static_cast<float>(0.08 + 0.15 * r.uniform());
        s.w = 1.0 + 0.2 * r.uniform();
        draw_deck(canvas, s);
        switch (style) {
            case BridgeStyle::Arch: draw_arch(canvas, s, r); break;
            case BridgeStyle::Truss: draw_truss(canvas, s, r); break;
            case BridgeStyle::Suspension: draw_suspension(canvas, s, r); break;
            case BridgeStyle::Coral: draw_coral(canvas, s, r); break;
        }
        ImageTextPair pair;
        pair.image = canvas.to_tensor();
        pair.tags = style_tags(style, r);
        pair.source = fmt::format("synth_{}_{:04d}", style_name(style), i);
        corpus.pairs.push_back(std::move(pair));
    }
    return corpus;
}

}  // namespace bridgediff
