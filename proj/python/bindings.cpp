#include "mega/attribution.hpp"
#include "mega/commands.hpp"
#include "mega/evaluation.hpp"
#include "mega/linalg.hpp"
#include "mega/pca.hpp"
#include "mega/steering.hpp"
#include "mega/toygen.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace mega;

namespace {

num::TensorF32 matrix_from_numpy(py::array_t<float, py::array::c_style | py::array::forcecast> a) {
    if (a.ndim() != 2) throw Error("expected a 2-D float array");
    num::TensorF32 t({size_t(a.shape(0)), size_t(a.shape(1))}, 0.0f);
    std::copy(a.data(), a.data() + a.size(), t.data.begin());
    return t;
}

std::vector<float> vector_from_numpy(
    py::array_t<float, py::array::c_style | py::array::forcecast> a) {
    if (a.ndim() != 1) throw Error("expected a 1-D float array");
    return std::vector<float>(a.data(), a.data() + a.size());
}

py::array_t<float> numpy_from_matrix(const num::TensorF32& t) {
    py::array_t<float> out({t.rows(), t.cols()});
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

py::array_t<float> numpy_from_vector(const std::vector<float>& v) {
    py::array_t<float> out(std::vector<py::ssize_t>{py::ssize_t(v.size())});
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

model::ModelConfig config_from_kwargs(size_t n_layers, size_t d_model, size_t n_heads,
                                      size_t d_ff, size_t vocab_size, size_t max_positions,
                                      float ln_eps) {
    model::ModelConfig c;
    c.n_layers = n_layers;
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.d_ff = d_ff;
    c.vocab_size = vocab_size;
    c.max_positions = max_positions;
    c.ln_eps = ln_eps;
    c.validate();
    return c;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Residual-stream attribution and scope-gated activation steering";

    py::register_exception<Error>(m, "MegaError");

    // --- numerics ---------------------------------------------------------
    m.def(
        "sym_eig",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> s) {
            num::EigResult r = num::sym_eig(num::SymmetricMatrix::from_tensor(matrix_from_numpy(s)));
            return py::make_tuple(numpy_from_vector(r.eigenvalues),
                                  numpy_from_matrix(r.eigenvectors));
        },
        py::arg("matrix"),
        "Symmetric eigendecomposition (cyclic Jacobi); returns (eigenvalues desc, column "
        "eigenvectors)");

    m.def(
        "sqrtm_psd",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> s, float floor) {
            return numpy_from_matrix(
                num::sqrtm_psd(num::SymmetricMatrix::from_tensor(matrix_from_numpy(s)), floor)
                    .to_tensor());
        },
        py::arg("matrix"), py::arg("floor") = 0.0f, "Symmetric PSD square root");

    py::class_<num::PcaProjector>(m, "PcaProjector")
        .def_property_readonly("mean",
                               [](const num::PcaProjector& p) { return numpy_from_vector(p.mean); })
        .def_property_readonly(
            "basis", [](const num::PcaProjector& p) { return numpy_from_matrix(p.basis); })
        .def_property_readonly("explained_variance",
                               [](const num::PcaProjector& p) {
                                   return numpy_from_vector(p.explained_variance);
                               })
        .def_property_readonly("k", &num::PcaProjector::k)
        .def("project",
             [](const num::PcaProjector& p,
                py::array_t<float, py::array::c_style | py::array::forcecast> h) {
                 return numpy_from_vector(p.project(vector_from_numpy(h)));
             })
        .def("reconstruct",
             [](const num::PcaProjector& p,
                py::array_t<float, py::array::c_style | py::array::forcecast> z) {
                 return numpy_from_vector(p.reconstruct(vector_from_numpy(z)));
             })
        .def("project_rows",
             [](const num::PcaProjector& p,
                py::array_t<float, py::array::c_style | py::array::forcecast> rows) {
                 return numpy_from_matrix(p.project_rows(matrix_from_numpy(rows)));
             });

    m.def(
        "pca_fit",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> data, size_t k,
           bool allow_zero_variance) {
            return num::pca_fit(matrix_from_numpy(data), k, allow_zero_variance);
        },
        py::arg("data"), py::arg("k"), py::arg("allow_zero_variance") = false);

    // --- tokenizer / model -------------------------------------------------
    py::class_<model::Tokenizer>(m, "Tokenizer")
        .def_static("byte_mode", &model::Tokenizer::byte_mode)
        .def_static("bpe_from_files", &model::Tokenizer::bpe_from_files, py::arg("vocab_path"),
                    py::arg("merges_path"))
        .def("encode", &model::Tokenizer::encode)
        .def("decode", &model::Tokenizer::decode)
        .def_property_readonly("vocab_size", &model::Tokenizer::vocab_size);

    py::class_<model::ResidualTrace>(m, "ResidualTrace")
        .def_property_readonly("position",
                               [](const model::ResidualTrace& t) { return t.position; })
        .def_property_readonly("logits",
                               [](const model::ResidualTrace& t) {
                                   return numpy_from_vector(t.logits);
                               })
        .def("lin", [](const model::ResidualTrace& t,
                       size_t l) { return numpy_from_vector(t.layers.at(l).lin); })
        .def("attn", [](const model::ResidualTrace& t,
                        size_t l) { return numpy_from_vector(t.layers.at(l).attn); })
        .def("lres", [](const model::ResidualTrace& t,
                        size_t l) { return numpy_from_vector(t.layers.at(l).lres); })
        .def("ffn", [](const model::ResidualTrace& t,
                       size_t l) { return numpy_from_vector(t.layers.at(l).ffn); })
        .def("lout", [](const model::ResidualTrace& t,
                        size_t l) { return numpy_from_vector(t.layers.at(l).lout); })
        .def_property_readonly("n_layers",
                               [](const model::ResidualTrace& t) { return t.layers.size(); });

    py::class_<model::Model>(m, "Model")
        .def_static(
            "load",
            [](const std::string& path, size_t n_layers, size_t d_model, size_t n_heads,
               size_t d_ff, size_t vocab_size, size_t max_positions, float ln_eps) {
                return model::Model::load(path, config_from_kwargs(n_layers, d_model, n_heads,
                                                                   d_ff, vocab_size,
                                                                   max_positions, ln_eps));
            },
            py::arg("path"), py::arg("n_layers"), py::arg("d_model"), py::arg("n_heads"),
            py::arg("d_ff"), py::arg("vocab_size"), py::arg("max_positions"),
            py::arg("ln_eps") = 1e-5f)
        .def("forward_logits",
             [](const model::Model& m, const std::vector<int>& tokens, size_t position) {
                 return numpy_from_vector(m.forward_logits(tokens, position));
             })
        .def("forward_trace",
             [](const model::Model& m, const std::vector<int>& tokens, size_t position) {
                 return m.forward_trace(tokens, position);
             })
        .def("logprob_from_state",
             [](const model::Model& m,
                py::array_t<float, py::array::c_style | py::array::forcecast> h, int token_id) {
                 return m.logprob_from_state(vector_from_numpy(h), token_id);
             })
        .def("greedy_decode",
             [](const model::Model& m, const std::vector<int>& tokens, size_t max_new) {
                 return m.greedy_decode(tokens, max_new);
             })
        .def_property_readonly("n_layers",
                               [](const model::Model& m) { return m.config().n_layers; })
        .def_property_readonly("d_model",
                               [](const model::Model& m) { return m.config().d_model; });

    // --- attribution --------------------------------------------------------
    py::class_<attr::ContributionProfile>(m, "ContributionProfile")
        .def_property_readonly("token_id",
                               [](const attr::ContributionProfile& p) { return p.token_id; })
        .def_property_readonly("baseline_logprob",
                               [](const attr::ContributionProfile& p) {
                                   return p.baseline_logprob;
                               })
        .def_property_readonly("final_logprob",
                               [](const attr::ContributionProfile& p) { return p.final_logprob; })
        .def_property_readonly("c",
                               [](const attr::ContributionProfile& p) {
                                   py::array_t<double> out({p.n_layers(), size_t(2)});
                                   auto* dst = out.mutable_data();
                                   for (size_t l = 0; l < p.n_layers(); ++l) {
                                       dst[2 * l] = p.c[l][0];
                                       dst[2 * l + 1] = p.c[l][1];
                                   }
                                   return out;
                               })
        .def("total", &attr::ContributionProfile::total);

    m.def(
        "contribution_profile",
        [](const model::Model& mdl, const std::vector<int>& tokens, size_t position, int token_id,
           const std::string& role) {
            return attr::contribution_profile(mdl, tokens, position, token_id,
                                              role == "ground_truth"
                                                  ? attr::TokenRole::GroundTruth
                                                  : attr::TokenRole::TargetNew);
        },
        py::arg("model"), py::arg("tokens"), py::arg("position"), py::arg("token_id"),
        py::arg("role") = "target_new");

    m.def("classify_outcome",
          [](double acc_pre, double acc_post, bool pre_correct) {
              return std::string(
                  attr::outcome_name(attr::classify_outcome(acc_pre, acc_post, pre_correct)));
          });

    m.def("build_ike_context",
          [](const std::vector<std::string>& demos, const std::string& prompt,
             const std::string& target_new) {
              return attr::build_ike_context(demos, prompt, target_new);
          });

    // --- steering -----------------------------------------------------------
    py::class_<steer::TransportMap>(m, "TransportMap")
        .def_property_readonly("A",
                               [](const steer::TransportMap& t) { return numpy_from_matrix(t.a); })
        .def_property_readonly("b",
                               [](const steer::TransportMap& t) { return numpy_from_vector(t.b); })
        .def_property_readonly("lam", [](const steer::TransportMap& t) { return t.lambda; })
        .def("apply", [](const steer::TransportMap& t,
                         py::array_t<float, py::array::c_style | py::array::forcecast> z) {
            return numpy_from_vector(t.apply(vector_from_numpy(z)));
        });

    m.def(
        "fit_transport",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> src,
           py::array_t<float, py::array::c_style | py::array::forcecast> tgt, float lam) {
            return steer::fit_transport(matrix_from_numpy(src), matrix_from_numpy(tgt), lam);
        },
        py::arg("src"), py::arg("tgt"), py::arg("lam") = 1e-2f);

    m.def(
        "augment_gaussian",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> acts, size_t per_sample,
           float sigma, uint64_t seed) {
            return numpy_from_matrix(
                steer::augment_gaussian(matrix_from_numpy(acts), per_sample, sigma, seed));
        },
        py::arg("acts"), py::arg("per_sample"), py::arg("sigma"), py::arg("seed") = 42);

    m.def("steer_transform",
          [](py::array_t<float, py::array::c_style | py::array::forcecast> h,
             const num::PcaProjector& proj, const steer::TransportMap& map) {
              return numpy_from_vector(steer::steer_transform(vector_from_numpy(h), proj, map));
          });

    py::class_<eval::EditCase>(m, "EditCase")
        .def(py::init<>())
        .def_readwrite("case_id", &eval::EditCase::case_id)
        .def_readwrite("prompt", &eval::EditCase::prompt)
        .def_readwrite("subject", &eval::EditCase::subject)
        .def_readwrite("ground_truth", &eval::EditCase::ground_truth)
        .def_readwrite("target_new", &eval::EditCase::target_new)
        .def_readwrite("paraphrase_prompts", &eval::EditCase::paraphrase_prompts)
        .def_readwrite("implication_prompts", &eval::EditCase::implication_prompts);

    m.def("load_cases_jsonl", &eval::load_cases_jsonl);

    py::class_<steer::SteeringPolicy>(m, "SteeringPolicy")
        .def_property_readonly("case_id",
                               [](const steer::SteeringPolicy& p) { return p.case_id; })
        .def_property_readonly("tau", [](const steer::SteeringPolicy& p) { return p.tau; })
        .def_property_readonly("n_entries",
                               [](const steer::SteeringPolicy& p) { return p.entries.size(); })
        .def("save", [](const steer::SteeringPolicy& p,
                        const std::string& path) { steer::save_policy(path, p); })
        .def_static("load", &steer::load_policy);

    m.def(
        "fit_policy",
        [](const model::Model& mdl, const model::Tokenizer& tok, const eval::EditCase& edit_case,
           size_t window_lo, size_t window_hi, const std::string& component, size_t k, float lam,
           float sigma, size_t per_sample, float tau, uint64_t seed, bool shared_map) {
            steer::PolicyConfig pc;
            pc.window_lo = window_lo;
            pc.window_hi = window_hi;
            pc.component = steer::component_from_name(component);
            pc.k = k;
            pc.lambda = lam;
            pc.sigma = sigma;
            pc.per_sample = per_sample;
            pc.tau = tau;
            pc.seed = seed;
            pc.shared_map = shared_map;
            return steer::fit_policy(mdl, tok, edit_case, pc);
        },
        py::arg("model"), py::arg("tokenizer"), py::arg("case"), py::arg("window_lo"),
        py::arg("window_hi"), py::arg("component") = "attn_res", py::arg("k") = 16,
        py::arg("lam") = 1e-2f, py::arg("sigma") = 0.1f, py::arg("per_sample") = 4,
        py::arg("tau") = 6.5f, py::arg("seed") = 42, py::arg("shared_map") = false);

    m.def("steered_forward",
          [](const model::Model& mdl, const steer::SteeringPolicy& policy,
             const std::vector<int>& tokens) {
              steer::ScopeResult scope;
              std::vector<float> logits = steer::steered_forward(mdl, policy, tokens, &scope);
              return py::make_tuple(numpy_from_vector(logits), scope.in_scope, scope.distance);
          });

    m.def("steered_decode",
          [](const model::Model& mdl, const steer::SteeringPolicy& policy,
             const std::vector<int>& tokens, size_t max_new) {
              return steer::steered_decode(mdl, policy, tokens, max_new);
          });

    m.def("in_scope",
          [](const steer::SteeringPolicy& policy, const model::Model& mdl,
             const model::Tokenizer& tok, const std::string& prompt) {
              steer::ScopeResult r = steer::in_scope(policy.detector, mdl, tok, prompt);
              return py::make_tuple(r.in_scope, r.distance);
          });

    // --- evaluation -----------------------------------------------------------
    m.def("make_doubt_prompts",
          [](const std::string& prompt, const std::string& ground_truth,
             const std::string& target_new) {
              eval::DoubtPrompts d = eval::make_doubt_prompts(prompt, ground_truth, target_new);
              return py::make_tuple(d.di, d.dii);
          });

    m.def("generate_toy",
          [](const std::string& out_dir, uint64_t seed, size_t n_cases) {
              cli::ToyGenResult r = cli::generate_toy(out_dir, seed, n_cases);
              py::dict d;
              d["model_path"] = r.model_path;
              d["dataset_path"] = r.dataset_path;
              d["config_path"] = r.config_path;
              d["n_cases"] = r.n_cases;
              d["tau"] = r.tau;
              return d;
          },
          py::arg("out_dir"), py::arg("seed") = 42, py::arg("n_cases") = 10);
}
