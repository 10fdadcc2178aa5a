"""The whole method end to end through the library API.

Train a small teacher, rank its MLP hidden neurons with the label-free
entropy criterion, let the halving search pick a per-block hidden size,
physically remove the dropped neurons, then distill the pruned student
against the frozen teacher and compare kNN accuracy, parameters and FLOPs
before and after.

This is the same sequence the ``amp`` CLI runs stage by stage; here it is
one script so each intermediate object can be inspected. Runs in a minute
or two on a laptop CPU.
"""

from amp.criterion import entropy_criterion
from amp.data import sample_prune_set, split_dataset, synth_dataset
from amp.distill import DistillConfig, train, train_supervised
from amp.evaluation import extract_features, knn_classify
from amp.importance import rank, score_dataset
from amp.model import (ModelConfig, count_flops, count_mlp_hidden_params,
                       count_params, init_random)
from amp.pruner import adaptive_prune, apply_surgery

TAU = 1.0 / 15.0


def knn(model, train_set, holdout):
    bank = extract_features(model, train_set)
    test = extract_features(model, holdout)
    return knn_classify(bank, test, k=20, temperature=0.07)


def main():
    config = ModelConfig(image_size=8, patch_size=4, embed_dim=16,
                         num_blocks=2, num_heads=2, mlp_hidden=32)
    full = synth_dataset(num_classes=4, per_class=60, image_size=8, seed=0)
    train_set, holdout = split_dataset(full, holdout_per_class=10, seed=0)

    print("1. teacher: supervised warm-up on the texture task")
    teacher = init_random(config, seed=0)
    train_supervised(teacher, 4, train_set,
                     DistillConfig(epochs=6, warmup_epochs=1, base_lr=4e-3,
                                   min_lr=1e-5, batch_size=32, seed=0))
    teacher_acc = knn(teacher, train_set, holdout)
    print(f"   kNN top-1: {teacher_acc:.2f}%  "
          f"params: {count_params(teacher)}  flops: {count_flops(teacher)}")

    print("\n2. score: Taylor importance under the entropy criterion "
          "(no labels used)")
    prune_set = sample_prune_set(train_set, 96, seed=1)
    criterion = lambda rec, labels: entropy_criterion(rec.z_cls, TAU)
    ranking = rank(score_dataset(teacher, prune_set, criterion, batch_size=32))

    print("\n3. prune: per-block halving search, last block first")
    plan, results = adaptive_prune(teacher, ranking, delta_e=0.05, t_max=6,
                                   prune_set=prune_set, temperature=TAU,
                                   batch_size=32)
    for res in sorted(results, key=lambda r: r.block):
        steps = ", ".join(f"m={r.m_t}{'+' if r.accepted else '-'}"
                          for r in res.trace)
        print(f"   block {res.block}: {res.m0} -> {res.m_res}  ({steps})")

    student = apply_surgery(teacher, plan)
    print(f"\n4. surgery: hidden sizes {plan.sizes()}, "
          f"MLP hidden params {count_mlp_hidden_params(teacher)} -> "
          f"{count_mlp_hidden_params(student)}")
    print(f"   un-finetuned kNN top-1: {knn(student, train_set, holdout):.2f}%")

    print("\n5. distill: student matches the frozen teacher's embeddings")
    _, records = train(student, teacher, train_set,
                       DistillConfig(epochs=8, warmup_epochs=1, base_lr=2e-3,
                                     min_lr=1e-5, batch_size=32, seed=0))
    print(f"   loss {records[0].loss:.4f} -> {records[-1].loss:.4f} "
          f"over {len(records)} steps")

    student_acc = knn(student, train_set, holdout)
    print(f"\n6. result: teacher {teacher_acc:.2f}% vs student "
          f"{student_acc:.2f}% at "
          f"{count_params(student) / count_params(teacher):.1%} of the "
          f"parameters and {count_flops(student) / count_flops(teacher):.1%} "
          f"of the FLOPs")


if __name__ == "__main__":
    main()
