#include <benchmark/benchmark.h>

#include <vector>

#include "sla/model.hpp"
#include "sla/objectives.hpp"
#include "sla/optimizer.hpp"
#include "sla/rng.hpp"
#include "sla/tensor.hpp"
#include "sla/transforms.hpp"

namespace {

sla::Tensor random_tensor(sla::Shape shape, sla::Rng& rng, bool requires_grad = false) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> values(n);
  for (double& v : values) v = rng.uniform(-1.0, 1.0);
  return sla::Tensor::from_values(std::move(shape), std::move(values), requires_grad);
}

void BM_MatmulForward(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  sla::Rng rng(1);
  sla::Tensor a = random_tensor({rows, 784}, rng);
  sla::Tensor b = random_tensor({784, 256}, rng);
  for (auto _ : state) {
    sla::Tensor c = sla::matmul(a, b);
    benchmark::DoNotOptimize(c.values().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows));
}
BENCHMARK(BM_MatmulForward)->Arg(128)->Arg(512);

void BM_MatmulBackward(benchmark::State& state) {
  sla::Rng rng(2);
  sla::Tensor a = random_tensor({256, 256}, rng, true);
  sla::Tensor b = random_tensor({256, 256}, rng, true);
  for (auto _ : state) {
    sla::sum(sla::matmul(a, b)).backward();
    a.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_MatmulBackward);

void BM_RotationApply(benchmark::State& state) {
  sla::Rng rng(3);
  sla::Image img(28, 28, 1);
  for (double& p : img.pixels) p = rng.next_double();
  sla::TransformationSet set = sla::rotation_set();
  std::size_t j = 0;
  for (auto _ : state) {
    sla::Image out = sla::apply(set[j], img);
    benchmark::DoNotOptimize(out.pixels.data());
    j = (j + 1) % set.size();
  }
}
BENCHMARK(BM_RotationApply);

// One optimization step of the joint objective on an MLP, the hot loop of
// the ordering experiment.
void BM_SlaTrainStep(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  sla::Rng rng(4);
  sla::SlaModel model;
  model.num_classes = 10;
  model.num_transforms = 4;
  sla::BackboneConfig bb;
  bb.kind = sla::BackboneKind::mlp;
  bb.input_dim = 784;
  bb.hidden_sizes = {256, 256};
  model.backbone = sla::Backbone(bb, rng);
  model.joint.emplace(10, 4, 256, rng);
  std::vector<sla::Parameter*> params = model.parameters();

  std::vector<sla::Image> images(batch, sla::Image(28, 28, 1));
  std::vector<sla::LabeledImage> examples;
  for (sla::Image& img : images) {
    for (double& p : img.pixels) p = rng.next_double();
    examples.push_back({&img, static_cast<int>(rng.next_below(10))});
  }
  sla::TransformationSet set = sla::rotation_set();
  sla::OptimizerConfig opt;

  std::size_t iteration = 0;
  for (auto _ : state) {
    sla::LossBreakdown loss = sla::loss_sla(model, examples, set);
    loss.total.backward();
    sla::sgd_step(params, opt, iteration++, 1u << 20);
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<std::int64_t>(batch * set.size()));
}
BENCHMARK(BM_SlaTrainStep)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
