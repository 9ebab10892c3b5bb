// Trains a small cnn_b cohort on synthetic data, splits an iFGSM perturbation
// into its noise and noise-reduced parts, and prints how each part transfers
// to models that took no part in the attack.
//
//   ./noise_split [copies]

#include <cstdio>
#include <string>

#include "advdecomp/decomposition.hpp"
#include "advdecomp/evaluation.hpp"
#include "advdecomp/train.hpp"

using namespace advdecomp;

int main(int argc, char** argv) {
  const std::size_t copies = argc > 1 ? std::stoul(argv[1]) : 6;
  if (copies < 4) {
    std::fprintf(stderr, "need at least 4 copies (1 attacked, >= 1 averaged, 2 held out)\n");
    return 2;
  }

  SyntheticSpec spec;
  spec.train_per_class = 200;
  const Dataset train_set = generate_synthetic(spec, Split::Train);
  const Dataset eval = take_first(generate_synthetic(spec, Split::Test), 200);

  TrainConfig tc;
  std::vector<ModelInstance> models;
  for (std::size_t c = 0; c < copies; ++c) {
    const auto arch = make_architecture("cnn_b", train_set.example_shape(), spec.classes);
    models.push_back(train(init_model(arch, model_seed(tc.global_seed, "cnn_b", c)), train_set, tc));
    std::printf("copy %zu  test accuracy %.3f\n", c, accuracy(models.back(), eval.inputs, eval.labels));
  }

  // Copy 0 is attacked alone; copies 1..n-3 join it in the ensemble; the last two are held out.
  std::vector<const ModelInstance*> ensemble;
  for (std::size_t c = 0; c + 2 < copies; ++c) ensemble.push_back(&models[c]);
  const NoiseDecomposition d = decompose_noise(ensemble, eval.inputs, eval.labels, AttackConfig{});

  ModelCohort cohort;
  cohort.add_group("M_orig", {&models[0]});
  cohort.add_group("M_test", {&models[copies - 2], &models[copies - 1]});
  const TransferReport r = transfer_table(
      cohort, {{"raw", &d.dx.delta}, {"nr", &d.dx_nr.delta}, {"noise", &d.dx_noise.delta}}, eval.inputs, eval.labels);
  std::printf("\n%s", format_table(r).c_str());
  return 0;
}
