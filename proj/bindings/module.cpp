// SPDX-License-Identifier: Apache-2.0
//
// Python bindings for the fixed-point emulation core: Q-format arithmetic,
// float/quantized forward passes, fine-tuning strategies, mismatch
// diagnostics and the grid harness.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fixnet/diagnostics.hpp"
#include "fixnet/harness.hpp"
#include "fixnet/serialize.hpp"

namespace py = pybind11;
using namespace fixnet;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape(size_t(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[size_t(i)] = int(a.shape(i));
    Tensor t(shape);
    std::copy_n(a.data(), size_t(a.size()), t.data.begin());
    return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> a(shape);
    std::copy_n(t.data.begin(), t.data.size(), a.mutable_data());
    return a;
}

Dataset dataset_from_arrays(const py::array_t<double, py::array::c_style | py::array::forcecast>& images,
                            const std::vector<int>& labels, int classes) {
    if (images.ndim() != 4) throw std::invalid_argument("images must be [N, C, H, W]");
    Dataset ds;
    ds.images = tensor_from_array(images);
    ds.labels = labels;
    ds.num_classes = classes;
    if (int(labels.size()) != ds.images.shape[0])
        throw std::invalid_argument("labels length must match images");
    return ds;
}

PrecisionAssignment make_assignment(const NetworkSpec& net, const Parameters& params,
                                    const std::string& wbits, const std::string& abits,
                                    const Tensor& calib) {
    PrecisionAssignment a =
        uniform_assignment(net, Precision::parse(wbits), Precision::parse(abits));
    calibrate_activations(a, net, params, calib);
    return a;
}

py::dict log_to_dict(const TrainLog& log) {
    py::list rows;
    for (const auto& r : log.rows) {
        py::dict d;
        d["step"] = r.step;
        d["phase"] = r.phase;
        d["loss"] = r.loss;
        d["lr"] = r.lr;
        d["trainable"] = r.trainable;
        rows.append(d);
    }
    py::dict out;
    out["rows"] = rows;
    out["diverged"] = log.diverged;
    out["divergence_step"] = log.divergence_step;
    return out;
}

StrategyConfig config_from_kwargs(double lr, int epochs, int batch_size, int top_k_layers,
                                  double divergence_factor, int calib_samples, uint64_t seed) {
    StrategyConfig cfg;
    cfg.lr = lr;
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.top_k_layers = top_k_layers;
    cfg.divergence_factor = divergence_factor;
    cfg.calib_samples = calib_samples;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "fixed-point inference emulation and quantization-aware fine-tuning";

    py::class_<QFormat>(m, "QFormat")
        .def(py::init<int, int, bool>(), py::arg("total_bits"), py::arg("frac_bits"),
             py::arg("is_signed") = true)
        .def_readonly("total_bits", &QFormat::total_bits)
        .def_readonly("frac_bits", &QFormat::frac_bits)
        .def_readonly("is_signed", &QFormat::is_signed)
        .def("lsb", &QFormat::lsb)
        .def("raw_min", &QFormat::raw_min)
        .def("raw_max", &QFormat::raw_max)
        .def("min_value", &QFormat::min_value)
        .def("max_value", &QFormat::max_value)
        .def("__str__", &QFormat::to_string)
        .def("__repr__", &QFormat::to_string)
        .def("__eq__", [](const QFormat& a, const QFormat& b) { return a == b; })
        .def_static("parse", &QFormat::parse);

    m.def("quantize", [](double x, const QFormat& fmt) {
        const QValue q = quantize(x, fmt);
        return py::make_tuple(q.raw, q.value());
    }, py::arg("x"), py::arg("fmt"), "round-to-nearest ties-away, saturating; returns (raw, value)");
    m.def("quantize_array", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& xs,
                               const QFormat& fmt) {
        py::array_t<int64_t> raw(xs.size());
        py::array_t<double> val(xs.size());
        for (py::ssize_t i = 0; i < xs.size(); ++i) {
            const QValue q = quantize(xs.data()[i], fmt);
            raw.mutable_data()[i] = q.raw;
            val.mutable_data()[i] = q.value();
        }
        return py::make_tuple(raw, val);
    });
    m.def("dequantize", [](int64_t raw, const QFormat& fmt) { return QValue{raw, fmt}.value(); });
    m.def("requantize", [](int64_t acc_raw, int acc_frac, const QFormat& target) {
        return requantize_raw(acc_raw, acc_frac, target);
    }, "pure-integer shift/round/saturate of an accumulator value");
    m.def("choose_format", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& xs,
                              int bits, bool is_signed) {
        return choose_format(std::span<const double>(xs.data(), size_t(xs.size())), bits, is_signed);
    }, py::arg("samples"), py::arg("total_bits"), py::arg("is_signed") = true);

    py::class_<NetworkSpec>(m, "NetworkSpec")
        .def_property_readonly("num_layers", &NetworkSpec::num_layers)
        .def_readonly("num_classes", &NetworkSpec::num_classes)
        .def("to_json", [](const NetworkSpec& n) { return net_to_json(n).dump(); })
        .def_static("from_json", [](const std::string& s) {
            return net_from_json(nlohmann::json::parse(s));
        });
    m.def("preset_network", &preset_network, py::arg("name"), py::arg("channels") = 1,
          py::arg("height") = 16, py::arg("width") = 16, py::arg("classes") = 10);

    py::class_<Parameters>(m, "Parameters")
        .def("count", &Parameters::count)
        .def("weight", [](const Parameters& p, int l) { return array_from_tensor(p.layers.at(size_t(l)).weight); })
        .def("bias", [](const Parameters& p, int l) { return array_from_tensor(p.layers.at(size_t(l)).bias); })
        .def("set_weight", [](Parameters& p, int l, const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
            Tensor t = tensor_from_array(a);
            if (t.data.size() != p.layers.at(size_t(l)).weight.data.size())
                throw std::invalid_argument("weight size mismatch");
            p.layers[size_t(l)].weight.data = std::move(t.data);
        })
        .def("set_bias", [](Parameters& p, int l, const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
            Tensor t = tensor_from_array(a);
            if (t.data.size() != p.layers.at(size_t(l)).bias.data.size())
                throw std::invalid_argument("bias size mismatch");
            p.layers[size_t(l)].bias.data = std::move(t.data);
        });
    m.def("init_parameters", [](const NetworkSpec& net, uint64_t seed) {
        Rng rng(seed);
        return init_parameters(net, rng);
    }, py::arg("net"), py::arg("seed") = 1);

    py::class_<Dataset>(m, "Dataset")
        .def_property_readonly("size", &Dataset::size)
        .def_readonly("num_classes", &Dataset::num_classes)
        .def_property_readonly("images", [](const Dataset& d) { return array_from_tensor(d.images); })
        .def_property_readonly("labels", [](const Dataset& d) { return d.labels; });
    m.def("make_synthetic", [](int classes, int count, int size, double noise, double class_scale,
                               double background_scale, uint64_t seed, uint64_t stream) {
        SyntheticSpec spec;
        spec.classes = classes;
        spec.count = count;
        spec.size = size;
        spec.noise = noise;
        spec.class_scale = class_scale;
        spec.background_scale = background_scale;
        return make_synthetic(spec, seed, stream);
    }, py::arg("classes") = 10, py::arg("count") = 1000, py::arg("size") = 16,
       py::arg("noise") = 0.12, py::arg("class_scale") = 0.3, py::arg("background_scale") = 1.0,
       py::arg("seed") = 1, py::arg("stream") = 0);
    m.def("load_idx", &load_idx, py::arg("images_path"), py::arg("labels_path"),
          py::arg("limit") = 0);
    m.def("dataset_from_arrays", &dataset_from_arrays, py::arg("images"), py::arg("labels"),
          py::arg("classes"));

    py::class_<PrecisionAssignment>(m, "PrecisionAssignment")
        .def("describe", [](const PrecisionAssignment& a) {
            std::string s = "input=" + a.input.to_string();
            for (size_t l = 0; l < a.weights.size(); ++l)
                s += " layer" + std::to_string(l + 1) + "(w=" + a.weights[l].to_string() +
                     ",a=" + a.acts[l].to_string() + ")";
            return s;
        });
    m.def("calibrate_assignment", [](const NetworkSpec& net, const Parameters& params,
                                     const std::string& wbits, const std::string& abits,
                                     const py::array_t<double, py::array::c_style | py::array::forcecast>& calib) {
        return make_assignment(net, params, wbits, abits, tensor_from_array(calib));
    }, py::arg("net"), py::arg("params"), py::arg("weight_bits"), py::arg("act_bits"),
       py::arg("calib_batch"));

    m.def("forward_float", [](const NetworkSpec& net, const Parameters& params,
                              const py::array_t<double, py::array::c_style | py::array::forcecast>& batch,
                              const std::vector<int>& labels) {
        const Trace t = forward_float(net, params, tensor_from_array(batch), labels);
        return py::make_tuple(t.loss, array_from_tensor(t.logits));
    }, py::arg("net"), py::arg("params"), py::arg("batch"), py::arg("labels"),
       "returns (loss, logits)");
    m.def("forward_quantized", [](const NetworkSpec& net, const Parameters& params,
                                  const PrecisionAssignment& assign,
                                  const py::array_t<double, py::array::c_style | py::array::forcecast>& batch,
                                  const std::vector<int>& labels) {
        const Trace t = forward_quantized(net, params, assign, tensor_from_array(batch), labels);
        return py::make_tuple(t.loss, array_from_tensor(t.logits));
    }, py::arg("net"), py::arg("params"), py::arg("assign"), py::arg("batch"), py::arg("labels"));

    m.def("gradients", [](const NetworkSpec& net, const Parameters& params,
                          const PrecisionAssignment* assign,
                          const py::array_t<double, py::array::c_style | py::array::forcecast>& batch,
                          const std::vector<int>& labels) {
        const Tensor b = tensor_from_array(batch);
        const Trace t = assign ? forward_quantized(net, params, *assign, b, labels)
                               : forward_float(net, params, b, labels);
        const GradientSet g = backward_presumed(net, t, labels);
        py::list out;
        for (size_t l = 0; l < g.dweight.size(); ++l)
            out.append(py::make_tuple(array_from_tensor(g.dweight[l]),
                                      array_from_tensor(g.dbias[l])));
        return py::make_tuple(t.loss, out);
    }, py::arg("net"), py::arg("params"), py::arg("assign").none(true), py::arg("batch"),
       py::arg("labels"),
       "presumed-gradient backward pass; returns (loss, [(dW, db) per layer])");

    m.def("evaluate_topk", [](const NetworkSpec& net, const Parameters& params,
                              const PrecisionAssignment* assign, const Dataset& data, int k) {
        return evaluate_topk(net, params, assign, data, k);
    }, py::arg("net"), py::arg("params"), py::arg("assign").none(true), py::arg("data"),
       py::arg("k") = 1);

    m.def("train_float", [](const NetworkSpec& net, const Dataset& data, double lr, int epochs,
                            int batch_size, uint64_t seed) {
        TrainFloatConfig cfg;
        cfg.lr = lr;
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        const FinetuneResult r = train_float(net, data, cfg, seed);
        return py::make_tuple(r.params, log_to_dict(r.log));
    }, py::arg("net"), py::arg("data"), py::arg("lr") = 0.05, py::arg("epochs") = 6,
       py::arg("batch_size") = 32, py::arg("seed") = 1);

    m.def("finetune", [](const NetworkSpec& net, const Parameters& start,
                         const std::string& strategy, const std::string& wbits,
                         const std::string& abits, const Dataset& data, double lr, int epochs,
                         int batch_size, int top_k_layers, double divergence_factor,
                         int calib_samples, uint64_t seed) {
        const StrategyConfig cfg = config_from_kwargs(lr, epochs, batch_size, top_k_layers,
                                                      divergence_factor, calib_samples, seed);
        const Precision W = Precision::parse(wbits), A = Precision::parse(abits);
        FinetuneResult r;
        const Strategy s = parse_strategy(strategy);
        switch (s) {
            case Strategy::Vanilla:
                r = finetune_vanilla(net, start, uniform_assignment(net, W, A), data, cfg);
                break;
            case Strategy::P1:
                r = finetune_float_activations(net, start, W, data, cfg);
                break;
            case Strategy::P2:
                r = finetune_top_layers(net, start, uniform_assignment(net, W, A), data, cfg);
                break;
            case Strategy::P3:
                r = finetune_bottom_up(net, start, uniform_assignment(net, W, A), data,
                                       build_phase_plan(net.num_layers(), epochs), cfg);
                break;
            default:
                throw std::invalid_argument("strategy must be vanilla, p1, p2 or p3");
        }
        return py::make_tuple(r.params, log_to_dict(r.log));
    }, py::arg("net"), py::arg("start"), py::arg("strategy"), py::arg("weight_bits"),
       py::arg("act_bits"), py::arg("data"), py::arg("lr") = 0.01, py::arg("epochs") = 2,
       py::arg("batch_size") = 32, py::arg("top_k_layers") = 1,
       py::arg("divergence_factor") = 3.0, py::arg("calib_samples") = 256, py::arg("seed") = 1);

    m.def("build_phase_plan", [](int num_layers, int epochs_per_phase) {
        const PhasePlan plan = build_phase_plan(num_layers, epochs_per_phase);
        py::list out;
        for (const Phase& p : plan.phases) {
            py::dict d;
            d["trainable_layer"] = p.trainable_layer + 1;  // 1-based, as reported
            py::list acts;
            for (int l : p.fixed_act_layers) acts.append(l + 1);
            d["fixed_point_activation_layers"] = acts;
            d["epochs"] = p.epochs;
            out.append(d);
        }
        return out;
    }, py::arg("num_layers"), py::arg("epochs_per_phase") = 1);

    m.def("mismatch_report", [](const NetworkSpec& net, const Parameters& params,
                                const std::string& wbits, const std::string& abits,
                                const Dataset& data, int batches, int batch_size, uint64_t seed) {
        Rng rng(mix_seed(seed, 0xD1A6));
        std::vector<Tensor> bt;
        std::vector<std::vector<int>> bl;
        for (int b = 0; b < batches; ++b) {
            std::vector<int> idx(static_cast<size_t>(batch_size));
            for (int i = 0; i < batch_size; ++i)
                idx[size_t(i)] = int(rng.below(uint64_t(data.size())));
            bt.push_back(data.gather(idx));
            bl.push_back(data.gather_labels(idx));
        }
        const PrecisionAssignment a =
            uniform_assignment(net, Precision::parse(wbits), Precision::parse(abits));
        const MismatchReport rep = mismatch_per_layer(net, params, a, bt, bl);
        py::list layers;
        for (const auto& st : rep.layers) {
            py::dict d;
            d["layer"] = st.layer;
            d["cosine_mean"] = st.cosine_mean;
            d["rel_err_mean"] = st.rel_err_mean;
            d["defined_batches"] = st.defined_batches;
            d["flag"] = st.flag;
            layers.append(d);
        }
        return layers;
    }, py::arg("net"), py::arg("params"), py::arg("weight_bits"), py::arg("act_bits"),
       py::arg("data"), py::arg("batches") = 20, py::arg("batch_size") = 32, py::arg("seed") = 1);

    m.def("descent_check", [](const NetworkSpec& net, const Parameters& params,
                              const std::string& wbits, const std::string& abits,
                              const py::array_t<double, py::array::c_style | py::array::forcecast>& batch,
                              const std::vector<int>& labels, double step_scale) {
        const PrecisionAssignment a =
            uniform_assignment(net, Precision::parse(wbits), Precision::parse(abits));
        const DescentReport r =
            descent_check(net, params, a, tensor_from_array(batch), labels, step_scale);
        py::dict d;
        d["delta"] = r.delta;
        d["eta"] = r.eta;
        d["grad_norm"] = r.grad_norm;
        d["sign"] = r.sign;
        d["flag"] = r.flag;
        return d;
    }, py::arg("net"), py::arg("params"), py::arg("weight_bits"), py::arg("act_bits"),
       py::arg("batch"), py::arg("labels"), py::arg("step_scale") = 1.0);

    m.def("save_checkpoint", [](const std::string& path, const NetworkSpec& net,
                                const Parameters& params) {
        save_checkpoint(path, net, params);
    });
    m.def("load_checkpoint", [](const std::string& path) {
        Checkpoint ck = load_checkpoint(path);
        return py::make_tuple(ck.net, ck.params);
    });

    m.def("run_grid", [](const std::string& config_json, const Parameters* start) {
        const RunConfig cfg = run_config_from_json(nlohmann::json::parse(config_json));
        const DataSplit data = cfg.dataset.load(cfg.seed);
        Parameters p0;
        if (start) {
            p0 = *start;
        } else {
            p0 = train_float(cfg.network, data.train, cfg.train_float, cfg.seed).params;
        }
        const GridReport rep = run_grid(cfg, cfg.network, p0, data);
        py::dict d;
        d["csv"] = rep.to_csv();
        d["json"] = rep.to_json();
        return d;
    }, py::arg("config_json"), py::arg("start").none(true) = py::none(),
       "full bit-width grid experiment; returns {'csv':..., 'json':...}");

    m.def("spearman", &spearman);
}
