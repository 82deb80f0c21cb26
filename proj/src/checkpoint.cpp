#include "nng/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace nng {

namespace {

using nlohmann::json;

json matrix_to_json(const Matrix& m)
{
    json entries = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) entries.push_back(m(i, j));
    }
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"entries", std::move(entries)}};
}

Matrix matrix_from_json(const json& j)
{
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto& entries = j.at("entries");
    if (static_cast<Eigen::Index>(entries.size()) != rows * cols) {
        throw std::runtime_error("checkpoint: matrix entry count does not match its shape");
    }
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = entries[static_cast<std::size_t>(i * cols + k)].get<double>();
    }
    return m;
}

json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from_json(const json& j)
{
    const auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json cache_to_json(const DampedInverses& d)
{
    return json{{"invA", matrix_to_json(d.invA)},         {"invS", matrix_to_json(d.invS)},
                {"rowFactor", matrix_to_json(d.rowFactor)}, {"colFactor", matrix_to_json(d.colFactor)},
                {"pi", d.pi},                               {"gamma", d.gamma},
                {"valid", d.valid}};
}

DampedInverses cache_from_json(const json& j)
{
    DampedInverses d;
    d.invA = matrix_from_json(j.at("invA"));
    d.invS = matrix_from_json(j.at("invS"));
    d.rowFactor = matrix_from_json(j.at("rowFactor"));
    d.colFactor = matrix_from_json(j.at("colFactor"));
    d.pi = j.at("pi").get<double>();
    d.gamma = j.at("gamma").get<double>();
    d.valid = j.at("valid").get<bool>();
    return d;
}

json arch_to_json(const MlpArchitecture& a)
{
    return json{{"layerSizes", a.layerSizes},
                {"activation", to_string(a.activation)},
                {"likelihood", to_string(a.likelihood)},
                {"bias", a.bias}};
}

MlpArchitecture arch_from_json(const json& j)
{
    MlpArchitecture a;
    a.layerSizes = j.at("layerSizes").get<std::vector<std::size_t>>();
    a.activation = parse_activation(j.at("activation").get<std::string>());
    a.likelihood = parse_likelihood(j.at("likelihood").get<std::string>());
    a.bias = j.at("bias").get<bool>();
    a.validate();
    return a;
}

json hyper_to_json(const Hyper& h)
{
    return json{{"lambda", h.lambda}, {"N", h.N}, {"eta", h.eta}, {"gammaEx", h.gammaEx}};
}

Hyper hyper_from_json(const json& j)
{
    Hyper h;
    h.lambda = j.at("lambda").get<double>();
    h.N = j.at("N").get<std::size_t>();
    h.eta = j.at("eta").get<double>();
    h.gammaEx = j.at("gammaEx").get<double>();
    h.validate();
    return h;
}

json gamma_to_json(const GammaPosterior& g) { return json{{"alpha", g.alpha}, {"beta", g.beta}}; }

GammaPosterior gamma_from_json(const json& j)
{
    GammaPosterior g{j.at("alpha").get<double>(), j.at("beta").get<double>()};
    g.validate();
    return g;
}

}  // namespace

std::string checkpoint_to_string(const Checkpoint& c)
{
    json j;
    j["format"] = "nng-checkpoint";
    j["version"] = 1;
    j["family"] = family_name(c.posterior);
    j["architecture"] = arch_to_json(architecture(c.posterior));
    j["hyper"] = hyper_to_json(hyper_of(c.posterior));
    j["step"] = c.step;
    j["seed"] = c.seed;
    json noise{{"tau", c.noise.tau}, {"prior", gamma_to_json(c.noise.prior)}};
    if (c.noise.q) noise["q"] = gamma_to_json(*c.noise.q);
    j["noise"] = std::move(noise);
    if (c.scaling) {
        j["scaling"] = json{{"featureMean", vector_to_json(c.scaling->featureMean)},
                            {"featureStd", vector_to_json(c.scaling->featureStd)},
                            {"targetMean", vector_to_json(c.scaling->targetMean)},
                            {"targetStd", vector_to_json(c.scaling->targetStd)}};
    }

    if (const auto* f = std::get_if<FfgPosterior>(&c.posterior)) {
        j["mu"] = vector_to_json(f->mu);
        j["fbar"] = vector_to_json(f->fbar);
    } else if (const auto* m = std::get_if<MvgPosterior>(&c.posterior)) {
        json layers = json::array();
        for (const auto& layer : m->layers) {
            layers.push_back(json{{"mean", matrix_to_json(layer.mean)},
                                  {"abar", matrix_to_json(layer.abar.matrix())},
                                  {"sbar", matrix_to_json(layer.sbar.matrix())},
                                  {"sampling", cache_to_json(layer.sampling)},
                                  {"step", cache_to_json(layer.step)}});
        }
        j["layers"] = std::move(layers);
    } else {
        const auto& full = std::get<FullPosterior>(c.posterior);
        j["mu"] = vector_to_json(full.mu);
        j["fbar"] = matrix_to_json(full.fbar.matrix());
    }
    return j.dump();
}

Checkpoint checkpoint_from_string(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(std::string("checkpoint: malformed JSON: ") + e.what());
    }
    if (j.value("format", "") != "nng-checkpoint") {
        throw std::runtime_error("checkpoint: not an nng checkpoint");
    }
    try {
        const MlpArchitecture arch = arch_from_json(j.at("architecture"));
        const Hyper hyper = hyper_from_json(j.at("hyper"));
        const std::string family = j.at("family").get<std::string>();

        Checkpoint c{FfgPosterior{}, NoiseModel{}, j.at("step").get<std::size_t>(),
                     j.at("seed").get<std::uint64_t>()};
        const json& noise = j.at("noise");
        c.noise.tau = noise.at("tau").get<double>();
        c.noise.prior = gamma_from_json(noise.at("prior"));
        if (noise.contains("q")) c.noise.q = gamma_from_json(noise.at("q"));
        if (j.contains("scaling")) {
            const json& sc = j.at("scaling");
            c.scaling = Scaling{vector_from_json(sc.at("featureMean")), vector_from_json(sc.at("featureStd")),
                                vector_from_json(sc.at("targetMean")), vector_from_json(sc.at("targetStd"))};
        }

        if (family == "ffg") {
            FfgPosterior p{arch, hyper, vector_from_json(j.at("mu")), vector_from_json(j.at("fbar"))};
            if (static_cast<std::size_t>(p.mu.size()) != arch.num_weights() || p.fbar.size() != p.mu.size()) {
                throw std::runtime_error("checkpoint: FFG vectors do not match the architecture");
            }
            c.posterior = std::move(p);
        } else if (family == "mvg") {
            MvgPosterior p;
            p.arch = arch;
            p.hyper = hyper;
            for (const auto& layer : j.at("layers")) {
                MvgLayer l;
                l.mean = matrix_from_json(layer.at("mean"));
                l.abar = SpdMatrix(matrix_from_json(layer.at("abar")));
                l.sbar = SpdMatrix(matrix_from_json(layer.at("sbar")));
                l.sampling = cache_from_json(layer.at("sampling"));
                l.step = cache_from_json(layer.at("step"));
                p.layers.push_back(std::move(l));
            }
            WeightSet w;
            for (const auto& l : p.layers) w.layers.push_back(l.mean);
            check_shapes(arch, w);
            c.posterior = std::move(p);
        } else if (family == "full") {
            FullPosterior p{arch, hyper, vector_from_json(j.at("mu")), SpdMatrix(matrix_from_json(j.at("fbar")))};
            if (static_cast<std::size_t>(p.mu.size()) != arch.num_weights() ||
                p.fbar.dim() != static_cast<std::size_t>(p.mu.size())) {
                throw std::runtime_error("checkpoint: full-covariance shapes do not match the architecture");
            }
            c.posterior = std::move(p);
        } else {
            throw std::runtime_error("checkpoint: unknown family '" + family + "'");
        }
        return c;
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: missing or mistyped field: ") + e.what());
    }
}

void save_checkpoint(const std::string& path, const Checkpoint& c)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out << checkpoint_to_string(c) << '\n';
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return checkpoint_from_string(buffer.str());
}

}  // namespace nng
