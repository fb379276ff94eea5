#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lightseg/bench.hpp"
#include "lightseg/convert.hpp"
#include "lightseg/gate.hpp"
#include "lightseg/kernels.hpp"
#include "lightseg/train.hpp"

namespace py = pybind11;
using namespace lightseg;

namespace {

using Array4f = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> tensor_from_numpy(const Array4f& a) {
  if (a.ndim() != 4) throw std::invalid_argument("expected a 4-D (N,C,H,W) array");
  const Shape4 shape{a.shape(0), a.shape(1), a.shape(2), a.shape(3)};
  std::vector<float> data(a.data(), a.data() + shape.numel());
  return Tensor<float>(shape, std::move(data));
}

py::array_t<float> numpy_from_tensor(const Tensor<float>& t) {
  const auto& s = t.shape();
  py::array_t<float> out({s.n, s.c, s.h, s.w});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

IntMask mask_from_numpy(const py::array_t<std::int32_t, py::array::c_style |
                                                            py::array::forcecast>& a) {
  IntMask m;
  if (a.ndim() == 2) {
    m.n = 1;
    m.h = a.shape(0);
    m.w = a.shape(1);
  } else if (a.ndim() == 3) {
    m.n = a.shape(0);
    m.h = a.shape(1);
    m.w = a.shape(2);
  } else {
    throw std::invalid_argument("expected a 2-D or 3-D integer mask");
  }
  m.values.assign(a.data(), a.data() + m.numel());
  return m;
}

py::array_t<std::int32_t> numpy_from_mask(const IntMask& m) {
  py::array_t<std::int32_t> out({m.n, m.h, m.w});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

Dataset dataset_from_arrays(const Array4f& images,
                            const py::array_t<std::int32_t, py::array::c_style |
                                                                py::array::forcecast>&
                                masks,
                            int num_classes) {
  if (images.ndim() != 4 || masks.ndim() != 3 || images.shape(0) != masks.shape(0)) {
    throw std::invalid_argument("expected images (B,3,H,W) and masks (B,H,W)");
  }
  Dataset ds;
  ds.num_classes = num_classes;
  ds.height = static_cast<int>(images.shape(2));
  ds.width = static_cast<int>(images.shape(3));
  const std::int64_t per_img = images.shape(1) * images.shape(2) * images.shape(3);
  const std::int64_t per_mask = masks.shape(1) * masks.shape(2);
  for (std::int64_t i = 0; i < images.shape(0); ++i) {
    SegSample s;
    std::vector<float> img(images.data() + i * per_img,
                           images.data() + (i + 1) * per_img);
    s.image = Tensor<float>({1, images.shape(1), images.shape(2), images.shape(3)},
                            std::move(img));
    s.mask.n = 1;
    s.mask.h = masks.shape(1);
    s.mask.w = masks.shape(2);
    s.mask.values.assign(masks.data() + i * per_mask,
                         masks.data() + (i + 1) * per_mask);
    s.id = std::to_string(i);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

py::dict dataset_to_dict(const Dataset& ds) {
  const std::int64_t b = static_cast<std::int64_t>(ds.samples.size());
  py::array_t<float> images({b, std::int64_t{3}, std::int64_t{ds.height},
                             std::int64_t{ds.width}});
  py::array_t<std::int32_t> masks(
      {b, std::int64_t{ds.height}, std::int64_t{ds.width}});
  const std::int64_t per_img = 3LL * ds.height * ds.width;
  const std::int64_t per_mask = static_cast<std::int64_t>(ds.height) * ds.width;
  for (std::int64_t i = 0; i < b; ++i) {
    const auto img = ds.samples[i].image.data();
    std::copy(img.begin(), img.end(), images.mutable_data() + i * per_img);
    std::copy(ds.samples[i].mask.values.begin(), ds.samples[i].mask.values.end(),
              masks.mutable_data() + i * per_mask);
  }
  py::dict out;
  out["images"] = images;
  out["masks"] = masks;
  out["num_classes"] = ds.num_classes;
  out["task"] = ds.task;
  return out;
}

GenConfig gen_config(GenTask task, int height, int width, int num_classes, int count,
                     std::uint64_t seed, int planted_offset, int noise_cell = 8) {
  GenConfig cfg;
  cfg.task = task;
  cfg.height = height;
  cfg.width = width;
  cfg.num_classes = num_classes;
  cfg.count = count;
  cfg.seed = seed;
  cfg.planted_offset = planted_offset;
  cfg.noise_cell = noise_cell;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "light dilated residual segmentation networks and a differentiable "
            "dilation-rate search";

  m.def("set_num_threads", &kern::set_num_threads);
  m.def("num_threads", &kern::num_threads);

  py::class_<NetworkSpec>(m, "NetworkSpec")
      .def_property_readonly("num_classes",
                             [](const NetworkSpec& s) { return s.num_classes; })
      .def_property_readonly("converted",
                             [](const NetworkSpec& s) { return s.converted; })
      .def_property_readonly(
          "variant", [](const NetworkSpec& s) { return to_string(s.variant); })
      .def_property_readonly("dilations",
                             [](const NetworkSpec& s) {
                               std::vector<int> d;
                               for (const auto* u : s.units()) d.push_back(u->dilation);
                               return d;
                             })
      .def("to_json", &spec_to_json)
      .def_static("from_json", &spec_from_json)
      .def("__repr__", [](const NetworkSpec& s) {
        return "<NetworkSpec " + to_string(s.variant) +
               (s.converted ? " dilated" : "") + ">";
      });

  py::class_<ParamStore<float>>(m, "ParamStore")
      .def("parameter_count", &ParamStore<float>::parameter_count)
      .def("save", [](const ParamStore<float>& p, const std::string& path) {
        save_params(path, p);
      })
      .def("load", [](ParamStore<float>& p, const std::string& path) {
        load_params(path, p);
      });

  m.def("build_network",
        [](const std::string& variant, int num_classes) {
          return build_network(variant_from_string(variant), num_classes);
        },
        py::arg("variant"), py::arg("num_classes") = 2);
  m.def("convert_to_dilated", &convert_to_dilated);
  m.def("output_stride", &output_stride);
  m.def("make_gated", &make_gated, py::arg("spec"),
        py::arg("candidates") = std::vector<int>{1, 2, 4, 8, 16});
  m.def("apply_dilations", &apply_dilations);
  m.def("parameter_count", py::overload_cast<const NetworkSpec&>(&parameter_count));
  m.def("flop_count", [](const NetworkSpec& spec, std::vector<std::int64_t> shape) {
    if (shape.size() != 4) throw std::invalid_argument("shape must have 4 entries");
    return flop_count(spec, Shape4{shape[0], shape[1], shape[2], shape[3]});
  });
  m.def("init_params", [](const NetworkSpec& spec, std::uint64_t seed) {
    return init_params<float>(spec, seed);
  });

  m.def("conv2d",
        [](const Array4f& x, const Array4f& w, py::object bias, int stride,
           int dilation, int padding) {
          Tape<float> tape(false);
          const Tensor<float> xt = tensor_from_numpy(x);
          const Tensor<float> wt = tensor_from_numpy(w);
          Conv2dOpts o;
          o.stride_h = o.stride_w = stride;
          o.dilation_h = o.dilation_w = dilation;
          o.pad_h = o.pad_w = padding;
          if (bias.is_none()) {
            return numpy_from_tensor(conv2d<float>(tape, xt, wt, nullptr, o));
          }
          std::vector<float> bv = bias.cast<std::vector<float>>();
          const Tensor<float> bt = Tensor<float>::vec(std::move(bv));
          return numpy_from_tensor(conv2d<float>(tape, xt, wt, &bt, o));
        },
        py::arg("input"), py::arg("weight"), py::arg("bias") = py::none(),
        py::arg("stride") = 1, py::arg("dilation") = 1, py::arg("padding") = 0);

  m.def("bilinear_upsample", [](const Array4f& x, int factor) {
    Tape<float> tape(false);
    return numpy_from_tensor(bilinear_upsample(tape, tensor_from_numpy(x), factor));
  });

  m.def("softmax_cross_entropy",
        [](const Array4f& logits,
           const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>&
               targets,
           py::object ignore) {
          Tape<float> tape(false);
          std::optional<int> ig;
          if (!ignore.is_none()) ig = ignore.cast<int>();
          return softmax_cross_entropy(tape, tensor_from_numpy(logits),
                                       mask_from_numpy(targets), ig)
              .data()[0];
        },
        py::arg("logits"), py::arg("targets"), py::arg("ignore_label") = py::none());

  m.def("mean_iou",
        [](const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>&
               pred,
           const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>&
               target,
           int classes) {
          return mean_iou(mask_from_numpy(pred), mask_from_numpy(target), classes);
        });

  m.def("gumbel_softmax_sample",
        [](std::vector<double> log_alpha, double tau, std::uint64_t seed, int draws) {
          GateState st;
          // candidate values do not affect sampling; only the count matters
          st.candidates.resize(log_alpha.size());
          for (std::size_t i = 0; i < log_alpha.size(); ++i) {
            st.candidates[i] = static_cast<int>(i) + 1;
          }
          st.log_alpha = std::move(log_alpha);
          st.tau = tau;
          std::mt19937_64 rng(seed);
          py::array_t<double> out({static_cast<std::int64_t>(draws),
                                   static_cast<std::int64_t>(st.log_alpha.size())});
          for (int d = 0; d < draws; ++d) {
            const auto z = gumbel_softmax_sample(st, rng);
            std::copy(z.begin(), z.end(), out.mutable_data() + d * z.size());
          }
          return out;
        },
        py::arg("log_alpha"), py::arg("tau") = 1.0, py::arg("seed") = 0,
        py::arg("draws") = 1);

  m.def("gen_blobs", [](int height, int width, int num_classes, int count,
                        std::uint64_t seed) {
    return dataset_to_dict(gen_blobs(
        gen_config(GenTask::blobs, height, width, num_classes, count, seed, 8)));
  },
        py::arg("height") = 96, py::arg("width") = 96, py::arg("num_classes") = 2,
        py::arg("count") = 16, py::arg("seed") = 0);

  m.def("gen_planted_dilation",
        [](int height, int width, int count, std::uint64_t seed, int offset,
           int noise_cell) {
          return dataset_to_dict(gen_planted_dilation(
              gen_config(GenTask::planted_dilation, height, width, 2, count, seed,
                         offset, noise_cell)));
        },
        py::arg("height") = 48, py::arg("width") = 128, py::arg("count") = 16,
        py::arg("seed") = 0, py::arg("planted_offset") = 8,
        py::arg("noise_cell") = 8);

  m.def("save_dataset",
        [](const Array4f& images,
           const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>&
               masks,
           int num_classes, const std::string& root) {
          save_dataset(dataset_from_arrays(images, masks, num_classes), root);
        });
  m.def("load_dataset",
        [](const std::string& root) { return dataset_to_dict(load_dataset(root)); });

  m.def("train",
        [](const NetworkSpec& spec, const Array4f& images,
           const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>&
               masks,
           int num_classes, int steps, int batch, float lr, std::uint64_t seed) {
          const Dataset ds = dataset_from_arrays(images, masks, num_classes);
          TrainConfig cfg;
          cfg.total_steps = steps;
          cfg.batch_size = batch;
          cfg.base_lr = lr;
          cfg.num_classes = num_classes;
          cfg.seed = seed;
          TrainResult r = train(spec, ds, cfg);
          std::vector<float> losses;
          for (const auto& row : r.log) losses.push_back(row.loss);
          return py::make_tuple(std::move(r.params), losses);
        },
        py::arg("spec"), py::arg("images"), py::arg("masks"),
        py::arg("num_classes") = 2, py::arg("steps") = 100, py::arg("batch") = 4,
        py::arg("lr") = 1e-3f, py::arg("seed") = 0);

  m.def("evaluate",
        [](const NetworkSpec& spec, ParamStore<float>& params, const Array4f& images,
           const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>&
               masks,
           int num_classes) {
          const Dataset ds = dataset_from_arrays(images, masks, num_classes);
          const EvalReport rep = evaluate(spec, params, ds);
          py::dict out;
          out["mean_iou"] = rep.iou.mean;
          out["per_class"] = rep.iou.per_class;
          return out;
        });

  m.def("predict",
        [](const NetworkSpec& spec, ParamStore<float>& params, const Array4f& image) {
          return numpy_from_mask(predict_mask(spec, params, tensor_from_numpy(image)));
        });

  m.def("run_search",
        [](const NetworkSpec& gated, const Array4f& images,
           const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>&
               masks,
           int num_classes, int steps, int batch, float lr, std::uint64_t seed,
           std::vector<int> candidates) {
          const Dataset ds = dataset_from_arrays(images, masks, num_classes);
          SearchConfig cfg;
          cfg.candidates = std::move(candidates);
          cfg.train.total_steps = steps;
          cfg.train.batch_size = batch;
          cfg.train.base_lr = lr;
          cfg.train.num_classes = num_classes;
          cfg.train.seed = seed;
          const SearchResult r = run_search(gated, ds, cfg);
          py::dict out;
          out["decoded"] = r.decoded;
          out["diverged"] = r.diverged;
          out["decoded_spec"] = r.decoded_spec;
          std::vector<float> losses;
          for (const auto& row : r.trace) losses.push_back(row.loss);
          out["losses"] = losses;
          return out;
        },
        py::arg("gated_spec"), py::arg("images"), py::arg("masks"),
        py::arg("num_classes") = 2, py::arg("steps") = 100, py::arg("batch") = 2,
        py::arg("lr") = 2e-3f, py::arg("seed") = 0,
        py::arg("candidates") = std::vector<int>{1, 2, 4, 8, 16});

  m.def("benchmark",
        [](const NetworkSpec& spec, std::vector<std::int64_t> shape, int warmup,
           int iters, std::uint64_t seed) {
          if (shape.size() != 4) throw std::invalid_argument("shape must have 4 entries");
          auto params = init_params<float>(spec, seed);
          const LatencyReport rep = benchmark(
              spec, params, Shape4{shape[0], shape[1], shape[2], shape[3]}, warmup,
              iters);
          py::dict out;
          out["median_ms"] = rep.median_ms;
          out["mean_ms"] = rep.mean_ms;
          out["p95_ms"] = rep.p95_ms;
          out["fps"] = rep.fps();
          out["flops"] = rep.flops;
          out["threads"] = rep.threads;
          return out;
        },
        py::arg("spec"), py::arg("shape"), py::arg("warmup") = 5,
        py::arg("iters") = 10, py::arg("seed") = 0);

  m.attr("__version__") = "0.1.0";
}
