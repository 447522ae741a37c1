#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "co3/cli.hpp"
#include "co3/dual.hpp"
#include "co3/error.hpp"
#include "co3/eval.hpp"
#include "co3/retrieval.hpp"
#include "co3/train.hpp"

namespace py = pybind11;
using namespace co3;

namespace {

Side side_arg(const std::string& s) { return parse_side(s); }

class Model {
 public:
  explicit Model(const std::filesystem::path& path, bool use_best) : m_(load_model(path, use_best)) {}

  std::string summarize(const std::string& code, int beam) { return run(Task::summarize, code, beam); }
  std::string generate(const std::string& query, int beam) { return run(Task::generate, query, beam); }

  std::vector<py::tuple> search(const std::string& query, const std::vector<std::string>& candidates) {
    std::vector<std::vector<int>> ids;
    for (const auto& c : candidates) ids.push_back(encode(m_.vocabs.code, tokenize(c, Side::code), m_.config.max_code_len));
    const auto q = encode(m_.vocabs.query, tokenize(query, Side::query), m_.config.max_query_len);
    std::vector<py::tuple> out;
    for (const auto& r : rank_candidates(m_.model, q, ids)) out.push_back(py::make_tuple(r.rank, r.score, r.candidate_id));
    return out;
  }

  std::vector<std::pair<std::string, int>> attribute(const std::string& text, const std::string& side) {
    const Side s = side_arg(side);
    const Vocab& v = s == Side::code ? m_.vocabs.code : m_.vocabs.query;
    const auto ids = encode(v, tokenize(text, s), s == Side::code ? m_.config.max_code_len : m_.config.max_query_len);
    const auto counts = pooling_attribution(m_.model, s, ids);
    std::vector<std::pair<std::string, int>> out;
    for (std::size_t i = 0; i < ids.size(); ++i) out.emplace_back(v.token_of(ids[i]), counts[i]);
    return out;
  }

  double log_prob(const std::string& source, const std::string& target, const std::string& task) {
    if (task != "summarize" && task != "generate") fail(ErrorCode::usage, "task must be summarize or generate");
    const Task t = task == "summarize" ? Task::summarize : Task::generate;
    const bool sum = t == Task::summarize;
    const auto src = encode(sum ? m_.vocabs.code : m_.vocabs.query, tokenize(source, sum ? Side::code : Side::query),
                            sum ? m_.config.max_code_len : m_.config.max_query_len);
    const auto tgt = encode(sum ? m_.vocabs.query : m_.vocabs.code, tokenize(target, sum ? Side::query : Side::code),
                            sum ? m_.config.max_query_len : m_.config.max_code_len);
    require_task(t);
    return conditional_logprob(m_.model, t, src, tgt);
  }

  std::map<std::string, std::string> config() const { return m_.config.to_map(); }
  long parameter_count() const { return m_.model.parameter_count(); }
  std::string variant() const { return std::string(variant_name(m_.config.variant)); }

 private:
  void require_task(Task t) const {
    if (!m_.model.has_task(t))
      fail(ErrorCode::precondition, "variant " + std::string(variant_name(m_.config.variant)) + " lacks this decoder");
  }

  std::string run(Task t, const std::string& text, int beam) {
    require_task(t);
    const bool sum = t == Task::summarize;
    const auto ids = encode(sum ? m_.vocabs.code : m_.vocabs.query, tokenize(text, sum ? Side::code : Side::query),
                            sum ? m_.config.max_code_len : m_.config.max_query_len);
    const int max_len = (sum ? m_.config.max_query_len : m_.config.max_code_len) - 2;
    const auto out = beam > 1 ? beam_decode(m_.model, t, ids, max_len, beam) : greedy_decode(m_.model, t, ids, max_len);
    std::string s;
    for (const auto& w : decode(sum ? m_.vocabs.query : m_.vocabs.code, out)) s += (s.empty() ? "" : " ") + w;
    return s;
  }

  LoadedModel m_;
};

py::dict parameter_counts(const std::string& variant, int code_vocab, int query_vocab, int hidden, int embed, int proj) {
  ModelSizing s{parse_variant(variant), code_vocab, query_vocab, hidden, embed, proj};
  const ModelParams m(s);
  py::dict d;
  d["total"] = m.parameter_count();
  d["cells"] = m.cell_parameter_count();
  d["bundles"] = m.cells.bundle_count();
  return d;
}

}  // namespace

PYBIND11_MODULE(_co3, m) {
  m.doc() = "Joint code retrieval, summarisation and generation";

  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, (std::string(error_code_name(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def("tokenize", [](const std::string& text, const std::string& side) { return tokenize(text, side_arg(side)); },
        py::arg("text"), py::arg("side") = "query");
  m.def("mrr", [](const std::vector<int>& r) { return mrr(r); }, py::arg("ranks"));
  m.def("ndcg", [](const std::vector<int>& r) { return ndcg(r); }, py::arg("ranks"));
  m.def("bleu4", [](const std::vector<Tokens>& c, const std::vector<Tokens>& r) { return bleu4(c, r); },
        py::arg("candidates"), py::arg("references"));
  m.def("sentence_bleu4", &sentence_bleu4, py::arg("candidate"), py::arg("reference"));
  m.def("meteor", &meteor, py::arg("candidate"), py::arg("reference"));
  m.def(
      "bleu_buckets",
      [](const std::vector<std::pair<double, int>>& records) {
        std::vector<BucketInput> in;
        for (const auto& [b, r] : records) in.push_back({b, r});
        std::vector<py::dict> out;
        for (const auto& b : bleu_bucket_analysis(in)) {
          py::dict d;
          d["lo"] = b.lo;
          d["hi"] = b.hi;
          d["count"] = b.count;
          d["mean_mrr"] = b.mean_mrr;
          out.push_back(d);
        }
        return out;
      },
      py::arg("records"));
  m.def(
      "dual_regularizer",
      [](double px, double py_, double yx, double xy) { return dual_regularizer({px, py_, yx, xy}); },
      py::arg("log_px"), py::arg("log_py"), py::arg("log_py_given_x"), py::arg("log_px_given_y"));
  m.def(
      "ranking_loss", [](double pos, double neg, double margin) { return ranking_loss(pos, neg, margin); },
      py::arg("pos"), py::arg("neg"), py::arg("margin") = 0.05);
  m.def(
      "paired_bootstrap_mrr",
      [](const std::vector<int>& a, const std::vector<int>& b, int samples, std::uint64_t seed) {
        const auto r = paired_bootstrap_mrr(a, b, samples, seed);
        py::dict d;
        d["delta"] = r.delta;
        d["ci_low"] = r.ci_low;
        d["ci_high"] = r.ci_high;
        d["p_value"] = r.p_value;
        return d;
      },
      py::arg("ranks_a"), py::arg("ranks_b"), py::arg("samples") = 1000, py::arg("seed") = 1);
  m.def("parameter_counts", &parameter_counts, py::arg("variant"), py::arg("code_vocab"), py::arg("query_vocab"),
        py::arg("hidden") = 400, py::arg("embed") = 200, py::arg("proj") = 400);
  m.def(
      "default_config", [] { return TrainConfig{}.to_map(); }, "Default training configuration as strings");
  m.def(
      "run",
      [](const std::vector<std::string>& args, const std::string& input) {
        std::istringstream in(input);
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, in, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), py::arg("input") = "", "Run a command-line invocation; returns (exit_code, stdout, stderr)");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&, bool>(), py::arg("checkpoint"), py::arg("use_best") = true)
      .def("summarize", &Model::summarize, py::arg("code"), py::arg("beam") = 1)
      .def("generate", &Model::generate, py::arg("query"), py::arg("beam") = 1)
      .def("search", &Model::search, py::arg("query"), py::arg("candidates"))
      .def("attribute", &Model::attribute, py::arg("text"), py::arg("side") = "code")
      .def("log_prob", &Model::log_prob, py::arg("source"), py::arg("target"), py::arg("task") = "summarize")
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("variant", &Model::variant)
      .def_property_readonly("parameter_count", &Model::parameter_count);
}
