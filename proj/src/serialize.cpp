#include "casrl/serialize.hpp"

#include <cstdio>

namespace casrl {

Json mat_to_json(const Mat& m) {
    std::vector<double> data(m.data(), m.data() + m.size());
    return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Mat mat_from_json(const Json& j) {
    Index rows = j.at("rows").get<Index>();
    Index cols = j.at("cols").get<Index>();
    auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Index>(data.size()) != rows * cols)
        throw DimensionError("mat_from_json: data length does not match shape");
    Mat m(rows, cols);
    std::copy(data.begin(), data.end(), m.data());
    return m;
}

Json vec_to_json(const Vec& v) {
    return Json(std::vector<double>(v.data(), v.data() + v.size()));
}

Vec vec_from_json(const Json& j) {
    auto data = j.get<std::vector<double>>();
    return Eigen::Map<const Vec>(data.data(), static_cast<Index>(data.size()));
}

namespace {

const char* act_name(Activation a) {
    switch (a) {
        case Activation::Linear: return "linear";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Sigmoid: return "sigmoid";
    }
    return "linear";
}

Activation act_from_name(const std::string& s) {
    if (s == "linear") return Activation::Linear;
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    if (s == "sigmoid") return Activation::Sigmoid;
    throw ContractError("unknown activation: " + s);
}

}  // namespace

Json mlp_to_json(const MlpParams& p) {
    Json layers = Json::array();
    for (const auto& l : p.layers) {
        layers.push_back(Json{{"w", mat_to_json(l.w)},
                              {"b", vec_to_json(l.b)},
                              {"act", act_name(l.act)}});
    }
    return Json{{"format", kMlpFormatTag}, {"layers", std::move(layers)}};
}

MlpParams mlp_from_json(const Json& j) {
    if (j.at("format").get<std::string>() != kMlpFormatTag)
        throw ContractError("mlp_from_json: unsupported format tag " +
                            j.at("format").get<std::string>());
    MlpParams p;
    for (const auto& lj : j.at("layers")) {
        MlpLayer l;
        l.w = mat_from_json(lj.at("w"));
        l.b = vec_from_json(lj.at("b"));
        l.act = act_from_name(lj.at("act").get<std::string>());
        if (l.b.size() != l.w.cols())
            throw DimensionError("mlp_from_json: bias/weight shape mismatch");
        p.layers.push_back(std::move(l));
    }
    if (p.layers.empty()) throw ContractError("mlp_from_json: no layers");
    for (size_t i = 0; i + 1 < p.layers.size(); ++i)
        if (p.layers[i].w.cols() != p.layers[i + 1].w.rows())
            throw DimensionError("mlp_from_json: adjacent layer dims incompatible");
    return p;
}

Json normalizer_to_json(const RunningNormalizer& n) {
    return Json{{"n", n.n_}, {"mean", vec_to_json(n.mean_)}, {"m2", vec_to_json(n.m2_)}};
}

RunningNormalizer normalizer_from_json(const Json& j) {
    RunningNormalizer n;
    n.n_ = j.at("n").get<int64_t>();
    n.mean_ = vec_from_json(j.at("mean"));
    n.m2_ = vec_from_json(j.at("m2"));
    return n;
}

Json adam_to_json(const AdamState& s) {
    auto arrs = [](const std::vector<Arr>& v) {
        Json out = Json::array();
        for (const auto& a : v)
            out.push_back(std::vector<double>(a.data(), a.data() + a.size()));
        return out;
    };
    return Json{{"m", arrs(s.m)},   {"v", arrs(s.v)},       {"step", s.step},
                {"lr", s.lr},       {"beta1", s.beta1},     {"beta2", s.beta2},
                {"eps", s.eps}};
}

AdamState adam_from_json(const Json& j) {
    AdamState s;
    auto arrs = [](const Json& ja) {
        std::vector<Arr> out;
        for (const auto& e : ja) {
            auto d = e.get<std::vector<double>>();
            out.emplace_back(Eigen::Map<const Arr>(d.data(), static_cast<Index>(d.size())));
        }
        return out;
    };
    s.m = arrs(j.at("m"));
    s.v = arrs(j.at("v"));
    s.step = j.at("step").get<int64_t>();
    s.lr = j.at("lr").get<double>();
    s.beta1 = j.at("beta1").get<double>();
    s.beta2 = j.at("beta2").get<double>();
    s.eps = j.at("eps").get<double>();
    return s;
}

std::string json_hash(const Json& j) {
    std::string canon = j.dump();
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace casrl
