// Python bindings for the torch-free core: data model, synthetic scans,
// preprocessing, metrics, ensembling, folds and the learning-rate schedule.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "covsev/dataset.hpp"
#include "covsev/errors.hpp"
#include "covsev/evaluate.hpp"
#include "covsev/folds.hpp"
#include "covsev/preprocess.hpp"
#include "covsev/schedule.hpp"
#include "covsev/volume.hpp"

namespace py = pybind11;
using namespace covsev;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> stack_to_array(const std::vector<Grid2D<T>>& stack) {
  if (stack.empty()) return py::array_t<T>(std::vector<py::ssize_t>{0, 0, 0});
  const auto h = stack.front().height, w = stack.front().width;
  py::array_t<T> out({static_cast<py::ssize_t>(stack.size()), static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
  auto* dst = out.mutable_data();
  for (const auto& g : stack) dst = std::copy(g.data.begin(), g.data.end(), dst);
  return out;
}

std::vector<Image2D> array_to_stack(const FloatArray& a) {
  if (a.ndim() != 3) throw ShapeError("expected a (depth, height, width) array");
  const auto d = a.shape(0), h = a.shape(1), w = a.shape(2);
  std::vector<Image2D> stack;
  const float* src = a.data();
  for (py::ssize_t z = 0; z < d; ++z) {
    Image2D img(h, w);
    std::copy(src + z * h * w, src + (z + 1) * h * w, img.data.begin());
    stack.push_back(std::move(img));
  }
  return stack;
}

py::array_t<float> volume_to_array(const VolumeTensor& v) {
  std::vector<py::ssize_t> shape(v.shape.begin(), v.shape.end());
  py::array_t<float> out(shape);
  std::copy(v.values.begin(), v.values.end(), out.mutable_data());
  return out;
}

ProbMatrix to_prob_matrix(const DoubleArray& a) {
  if (a.ndim() != 2 || a.shape(1) != kNumClasses) throw ShapeError("expected an (n, 4) probability array");
  ProbMatrix m(static_cast<std::size_t>(a.shape(0)));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t c = 0; c < 4; ++c) m[i][c] = a.data()[i * 4 + c];
  return m;
}

py::array_t<double> from_prob_matrix(const ProbMatrix& m) {
  py::array_t<double> out({static_cast<py::ssize_t>(m.size()), static_cast<py::ssize_t>(kNumClasses)});
  auto* dst = out.mutable_data();
  for (const auto& row : m) dst = std::copy(row.begin(), row.end(), dst);
  return out;
}

py::dict record_to_dict(const ScanRecord& r) {
  py::dict d;
  d["scan_id"] = r.scan_id;
  d["source"] = r.source;
  d["label"] = r.label ? py::object(py::int_(severity_value(*r.label))) : py::none();
  d["split"] = r.split;
  d["slices"] = stack_to_array(r.slices);
  std::vector<Mask2D> lung, infection;
  for (const auto& m : r.ground_truth_masks) {
    lung.push_back(m.lung);
    infection.push_back(m.infection);
  }
  d["lung_masks"] = stack_to_array(lung);
  d["infection_masks"] = stack_to_array(infection);
  return d;
}

std::vector<ScanRecord> labeled_records(const std::vector<std::string>& ids, const std::vector<int>& grades) {
  if (ids.size() != grades.size()) throw std::invalid_argument("ids and grades differ in length");
  std::vector<ScanRecord> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out[i].scan_id = ids[i];
    out[i].label = severity_from_value(grades[i]);
  }
  return out;
}

py::dict report_to_dict(const MetricsReport& r) {
  py::dict d;
  d["scenario"] = r.scenario;
  d["model"] = r.model;
  d["config_hash"] = r.config_hash;
  d["confusion"] = r.confusion;
  py::list per_class;
  for (const auto& s : r.per_class) {
    py::dict c;
    c["precision"] = s.precision;
    c["recall"] = s.recall;
    c["f1"] = s.f1;
    per_class.append(c);
  }
  d["per_class"] = per_class;
  d["macro_f1"] = r.macro_f1;
  d["n"] = r.n;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "CT-scan COVID-19 severity pipeline: core data, preprocessing and metrics";

  static py::exception<ManifestError> manifest_error(m, "ManifestError", PyExc_ValueError);
  static py::exception<ParseError> parse_error(m, "ParseError", PyExc_ValueError);
  static py::exception<IoError> io_error(m, "IoError", PyExc_OSError);
  static py::exception<ShapeError> shape_error(m, "ShapeError", PyExc_ValueError);
  static py::exception<ContractError> contract_error(m, "ContractError", PyExc_RuntimeError);
  static py::exception<CacheError> cache_error(m, "CacheError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ManifestError& e) {
      py::set_error(manifest_error, e.what());
    } catch (const ParseError& e) {
      py::set_error(parse_error, e.what());
    } catch (const IoError& e) {
      py::set_error(io_error, e.what());
    } catch (const ShapeError& e) {
      py::set_error(shape_error, e.what());
    } catch (const ContractError& e) {
      py::set_error(contract_error, e.what());
    } catch (const CacheError& e) {
      py::set_error(cache_error, e.what());
    }
  });

  m.attr("CLASS_NAMES") = py::make_tuple("mild", "moderate", "severe", "critical");
  m.def("severity_name", [](int grade) { return std::string(severity_name(severity_from_value(grade))); },
        py::arg("grade"));

  // Dataset
  m.def(
      "load_manifest",
      [](const std::filesystem::path& path) {
        py::list out;
        for (const auto& r : load_manifest(path).records) out.append(record_to_dict(r));
        return out;
      },
      py::arg("path"), "Rows of a `scan_id,path,severity,split` manifest (slices not loaded).");
  m.def(
      "load_scan",
      [](const std::filesystem::path& source) {
        ScanRecord r;
        r.scan_id = source.filename().string();
        r.source = source;
        return record_to_dict(load_scan(r));
      },
      py::arg("source"), "Reads a scan directory or volume file.");
  m.def(
      "synthetic_dataset",
      [](int n_per_class, std::uint64_t seed, std::int64_t slices, std::int64_t height, std::int64_t width,
         const std::string& prefix, const std::string& split) {
        py::list out;
        for (const auto& r : generate_synthetic_dataset(n_per_class, seed, {slices, height, width}, prefix, split).records)
          out.append(record_to_dict(r));
        return out;
      },
      py::arg("n_per_class"), py::arg("seed"), py::arg("slices") = 40, py::arg("height") = 64, py::arg("width") = 64,
      py::arg("prefix") = "synth", py::arg("split") = "");
  m.def(
      "class_distribution",
      [](const std::vector<int>& grades) {
        return class_distribution(labeled_records(std::vector<std::string>(grades.size()), grades));
      },
      py::arg("grades"));

  // Preprocessing
  m.def(
      "pack_volume", [](const FloatArray& stack, std::array<std::int64_t, 3> target) {
        return volume_to_array(pack_volume(array_to_stack(stack), target));
      },
      py::arg("stack"), py::arg("target"), "Trilinear resampling of a (D, H, W) stack, clamped to [0, 1].");
  m.def(
      "select_slices",
      [](const std::vector<double>& p, double threshold, std::size_t min_keep) {
        return select_slices(p, threshold, min_keep);
      },
      py::arg("probabilities"), py::arg("threshold") = 0.5,
        py::arg("min_keep") = 8);
  m.def("heuristic_lung_score", [](const FloatArray& slice) {
    if (slice.ndim() != 2) throw ShapeError("expected a (height, width) slice");
    Image2D img(slice.shape(0), slice.shape(1));
    std::copy(slice.data(), slice.data() + slice.size(), img.data.begin());
    return heuristic_lung_filter(img);
  });
  m.def(
      "read_volume",
      [](const std::filesystem::path& payload) {
        auto [header, vol] = read_volume_file(payload);
        return py::make_tuple(volume_to_array(vol), header.scan_id, header.pipeline_config_hash);
      },
      py::arg("payload"), "Returns (array, scan_id, config_hash) of a cached volume.");

  // Metrics and ensembling
  m.def(
      "macro_f1", [](const std::vector<int>& y_true, const std::vector<int>& y_pred) { return macro_f1(y_true, y_pred); },
      py::arg("y_true"), py::arg("y_pred"), "Macro F1 in percent over the four classes (indices 0..3).");
  m.def(
      "confusion_matrix",
      [](const std::vector<int>& y_true, const std::vector<int>& y_pred) { return confusion_matrix(y_true, y_pred); },
      py::arg("y_true"), py::arg("y_pred"));
  m.def(
      "ensemble",
      [](const std::vector<DoubleArray>& sets, const std::vector<double>& weights, const std::string& rule) {
        std::vector<ProbMatrix> mats;
        for (const auto& s : sets) mats.push_back(to_prob_matrix(s));
        EnsembleRule r;
        if (rule == "mean") r = EnsembleRule::Mean;
        else if (rule == "vote") r = EnsembleRule::MajorityVote;
        else throw std::invalid_argument("rule must be 'mean' or 'vote'");
        return from_prob_matrix(ensemble_probs(mats, weights, r));
      },
      py::arg("prob_sets"), py::arg("weights") = std::vector<double>{}, py::arg("rule") = "mean");
  m.def(
      "report",
      [](const std::vector<int>& y_true, const DoubleArray& probs, const std::string& scenario,
         const std::string& model) {
        const auto p = to_prob_matrix(probs);
        return report_to_dict(make_report(y_true, p, {scenario, model, ""}));
      },
      py::arg("y_true"), py::arg("probs"), py::arg("scenario") = "", py::arg("model") = "");
  m.def("read_report", [](const std::filesystem::path& p) { return report_to_dict(read_report(p)); }, py::arg("path"));
  m.def(
      "read_probabilities",
      [](const std::filesystem::path& p) {
        const auto t = read_probabilities_csv(p);
        py::list labels;
        for (const auto& l : t.labels) labels.append(l ? py::object(py::int_(severity_value(*l))) : py::none());
        return py::make_tuple(t.scan_ids, labels, from_prob_matrix(t.probs));
      },
      py::arg("path"), "Returns (scan_ids, grades, (n, 4) probabilities).");

  // Folds and schedule
  m.def(
      "stratified_kfold",
      [](const std::vector<std::string>& ids, const std::vector<int>& grades, int k, std::uint64_t seed) {
        return stratified_kfold(labeled_records(ids, grades), k, seed).fold_of;
      },
      py::arg("ids"), py::arg("grades"), py::arg("k") = 5, py::arg("seed") = 0, "Maps scan id to a fold in [0, k).");
  m.def(
      "lr_at_epoch",
      [](double initial_lr, const std::vector<int>& decay_epochs, double factor, int epoch) {
        TrainConfig c;
        c.initial_lr = initial_lr;
        c.lr_decay_epochs = decay_epochs;
        c.lr_decay_factor = factor;
        return lr_at_epoch(c, epoch);
      },
      py::arg("initial_lr"), py::arg("decay_epochs"), py::arg("factor"), py::arg("epoch"));
  m.def("reference_schedule", [](const std::string& arch) {
    const auto c = arch == "2d" ? TrainConfig::reference_2d()
                   : arch == "3d" ? TrainConfig::reference_3d()
                                  : throw std::invalid_argument("arch must be '2d' or '3d'");
    py::dict d;
    d["epochs"] = c.epochs;
    d["batch_size"] = c.batch_size;
    d["lr"] = c.initial_lr;
    d["lr_decay_epochs"] = c.lr_decay_epochs;
    d["lr_decay_factor"] = c.lr_decay_factor;
    return d;
  }, py::arg("arch"));
}
