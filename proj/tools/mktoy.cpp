// Generates a toy FP model container, JSONL train/eval splits, and a run
// config, so the qalora pipeline can be exercised end to end from files:
//   qalora-mktoy --task linear --out-dir demo
//   qalora quantize demo/model.qalm demo/q.qalm --bits 4 --group-size 8
//   qalora train demo/q.qalm demo/train.jsonl demo/train.cfg demo/tuned.qalm
//   qalora merge demo/tuned.qalm demo/merged.qalm
//   qalora verify demo/tuned.qalm demo/merged.qalm
//   qalora eval demo/merged.qalm demo/eval.jsonl

#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "qalora/container.hpp"
#include "qalora/tasks.hpp"

int main(int argc, char** argv) {
    CLI::App app{"generate a toy model, datasets and config for the qalora CLI"};
    std::string task = "linear";
    std::string out_dir = ".";
    std::uint64_t seed = 7;
    std::size_t steps = 1500;
    app.add_option("--task", task, "linear, mlp or blobs");
    app.add_option("--out-dir", out_dir, "output directory");
    app.add_option("--seed", seed, "generator seed");
    app.add_option("--steps", steps, "steps written into the config");
    CLI11_PARSE(app, argc, argv);

    try {
        qalora::tasks::ToyTask toy;
        std::size_t rank = 8;
        std::size_t group_size = 8;
        if (task == "linear") {
            toy = qalora::tasks::make_linear_teacher_task({}, seed);
        } else if (task == "mlp") {
            toy = qalora::tasks::make_mlp_teacher_task({}, seed);
        } else if (task == "blobs") {
            toy = qalora::tasks::make_blob_task({}, seed);
            rank = 4;
            group_size = 2;
        } else {
            std::cerr << "unknown task " << task << "\n";
            return 2;
        }

        const std::filesystem::path dir(out_dir);
        std::filesystem::create_directories(dir);
        qalora::container::save(toy.fp_model, dir / "model.qalm");
        qalora::save_dataset_jsonl(toy.train, dir / "train.jsonl");
        qalora::save_dataset_jsonl(toy.eval, dir / "eval.jsonl");

        std::ofstream cfg(dir / "train.cfg");
        cfg << "steps = " << steps << "\n"
            << "rank = " << rank << "\n"
            << "bits = 4\n"
            << "group_size = " << group_size << "\n"
            << "learning_rate = 0.005\n"
            << "seed = " << seed << "\n";
        std::cout << "wrote model.qalm, train.jsonl, eval.jsonl, train.cfg under "
                  << dir.string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
