// Smallest end-to-end use of the library: synthetic data, a narrow teacher, one distilled
// student and one baseline, compared on the held-out subjects.

#include <iostream>

#include "mtkd/mtkd.hpp"

using namespace mtkd;

int main(int argc, char** argv) {
    const std::size_t epochs = argc > 1 ? std::stoul(argv[1]) : 5;
    try {
        const Dataset pool = make_synthetic_dataset(120, {32, 32}, 0);
        const auto [train, val] = split_by_subject(pool, 0.2, 0);

        ModelConfig tcfg = ModelConfig::defaults(ModelRole::teacher_mt_unet);
        tcfg.base_channels = 4;
        TrainOptions topt = teacher_defaults();
        topt.epochs = epochs;
        topt.optimizer.lr = 1e-3;
        auto teacher = train_teacher<float>(train, &val, tcfg, topt, 0.1);
        std::cout << "teacher  IoU " << evaluate_model(*teacher.model, val).aggregate.iou << '\n';

        DistillationPlan plan;
        plan.name = "bn_pmd";
        plan.scales = {Scale::bottleneck};
        plan.pmd = true;
        plan.weights.w_bn = 0.01;
        plan.weights.pmd_temperature = 1.0;
        plan.epochs = epochs;
        auto kd = distill<float>(plan, *teacher.model, train, &val);
        std::cout << plan.label() << "  IoU " << evaluate_model(*kd.model, val).aggregate.iou << '\n';

        TrainOptions sopt;
        sopt.epochs = epochs;
        auto base = train_student_baseline<float>(train, &val, ModelConfig::defaults(ModelRole::student_s1), sopt);
        std::cout << "baseline IoU " << evaluate_model(*base.model, val).aggregate.iou << '\n';
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
