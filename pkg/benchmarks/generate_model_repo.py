import os
import argparse

import numpy as np

from servekit.io import write_affine_model
from servekit.models import AffineModel


def generate_model_repo(root, num_models, num_versions, in_dim, out_dim,
                        seed=1):
    rng = np.random.RandomState(seed)
    written = []
    for m in range(num_models):
        base = os.path.join(root, 'model{}'.format(m))
        for v in range(1, num_versions + 1):
            version_dir = os.path.join(base, str(v))
            os.makedirs(version_dir, exist_ok=True)
            model = AffineModel(
                W=rng.normal(size=(out_dim, in_dim)),
                b=rng.normal(size=out_dim),
                feature_order=['x{}'.format(i) for i in range(in_dim)])
            write_affine_model(version_dir, model)
            written.append(version_dir)
    return written


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument('--root', type=str, required=True)
    parser.add_argument('--num-models', type=int, default=4)
    parser.add_argument('--num-versions', type=int, default=2)
    parser.add_argument('--in-dim', type=int, default=16)
    parser.add_argument('--out-dim', type=int, default=1)
    parser.add_argument('--seed', type=int, default=1)
    args = parser.parse_args()

    dirs = generate_model_repo(args.root, args.num_models, args.num_versions,
                               args.in_dim, args.out_dim, args.seed)
    print("Wrote {} model versions under {}".format(len(dirs), args.root))
