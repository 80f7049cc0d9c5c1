"""Plain vs PGD-adversarially-trained classifier on the default ring:
clean accuracy and PGD misclassification over a range of budgets."""

import argparse
import sys

import numpy as np

from diffuae.data import make_ring_mixture
from diffuae.training import PgdConfig, TrainConfig, accuracy, adversarial_train, pgd_attack


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-eps", type=float, default=0.3)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    train = make_ring_mixture(K=8, n=500, gamma=0.2, seed=1)
    test = make_ring_mixture(K=8, n=250, gamma=0.2, seed=2)
    tc = TrainConfig(epochs=args.epochs, batch_size=128, lr=0.1, seed=args.seed)
    hidden = (128, 128, 128)
    plain = adversarial_train(tc, None, train, hidden=hidden)
    eps = args.train_eps
    robust = adversarial_train(tc, PgdConfig(eps, eps / 4, 10), train, hidden=hidden)

    print(f"clean accuracy: plain {accuracy(plain, test.x, test.y):.4f}, AT {accuracy(robust, test.x, test.y):.4f}")
    for e in (0.1, 0.2, 0.3, 0.4, 0.5):
        cfg = PgdConfig(e, e / 4, 20)
        rates = []
        for clf in (plain, robust):
            adv = pgd_attack(clf, test.x, test.y, cfg, np.random.default_rng(0))
            rates.append(float(np.mean(clf.predict(adv) != test.y)))
        print(f"eps {e:.1f}: PGD misclassification plain {rates[0]:.4f}, AT {rates[1]:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
