"""The two synthetic tasks: HashHop chains and multi-query associative recall.

HashHop hides a chain a -> b -> c ... among distractor pairs, shuffled. The
answerer gets the start element and must walk the chain; h_gq is the length of
the longest correct prefix over the chain length.

MQAR lists key/value pairs, then asks for some keys again; accuracy is the
fraction of answered values that are right.

    python demos/hashhop_tasks.py --seed 3
"""

import argparse

from recurformer.tasks import (
    HashHopInstance,
    MQARInstance,
    MQARVocab,
    echo_oracle,
    generate_hashhop,
    generate_mqar,
    score_hashhop,
    score_mqar,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    pairs = [("03", "04"), ("10", "17"), ("01", "02"), ("62", "23"), ("05", "06"),
             ("99", "85"), ("02", "03"), ("21", "34"), ("04", "05"), ("42", "73")]
    worked = HashHopInstance.from_pairs(pairs, "01")
    print(worked.render())
    print("chain:", " -> ".join(worked.target_chain))
    for guess in ("01 02 03 04 05 06", "01 02 03 77", "02 03"):
        print(f"  answer {guess!r:24} h_gq = {score_hashhop(worked, guess):.4f}")

    inst = generate_hashhop(args.seed, h_e=4, h_p=5, h_l=200)
    print(f"\ngenerated (seed {args.seed}):\n{inst.render()}{inst.answer()}")
    print("echo oracle h_gq:", score_hashhop(inst, echo_oracle(inst)))

    mq = MQARInstance.from_pairs([("A", 4), ("F", 1), ("B", 3), ("C", 6)], ["A", "C", "F"])
    print("\nMQAR stream:", " ".join(map(str, mq.tokens())))
    print("accuracy of 4,6,1:", score_mqar(mq, [4, 6, 1]), " of 4,6,2:", round(score_mqar(mq, [4, 6, 2]), 4))

    v = MQARVocab()
    gen = generate_mqar(args.seed, n_pairs=4, length=24, key_vocab=v.keys, value_vocab=v.values, n_queries=2)
    print("generated MQAR tokens:", gen.tokens())


if __name__ == "__main__":
    main()
