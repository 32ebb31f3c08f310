"""Convert a Spiking Heidelberg Digits HDF5 file into the binary raster format.

Each recording is cut into T equal-width bins spanning its own duration (the
last event time, or --max-time when given); a cell is 1 when the channel fired
at least once in that bin.

    python3 python/shd_to_raster.py shd_train.h5 shd.raster
    python3 python/shd_to_raster.py shd_train.h5 shd2.raster --classes 0,1 --limit 500
"""
import argparse
import struct
import sys

import h5py
import numpy as np

MAGIC = b"SPKRASTR"
VERSION = 1
SHD_TAG = 3
CHANNELS = 700


def bin_example(times, units, steps, max_time=None):
    grid = np.zeros((steps, CHANNELS), dtype=np.uint8)
    if len(times) == 0:
        return grid
    span = max_time if max_time else float(times.max())
    keep = times <= span
    if span <= 0:
        grid[0, units[keep].astype(np.int64)] = 1
        return grid
    t = np.minimum((times[keep] / span * steps).astype(np.int64), steps - 1)
    grid[t, units[keep].astype(np.int64)] = 1
    return grid


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("h5")
    p.add_argument("out")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--max-time", type=float, default=None, help="fixed span in seconds instead of each recording's duration")
    p.add_argument("--classes", default="", help="comma-separated labels to keep, relabelled 0..k-1")
    p.add_argument("--limit", type=int, default=0, help="keep at most this many examples (seeded shuffle)")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    with h5py.File(args.h5, "r") as f:
        times = f["spikes"]["times"][:]
        units = f["spikes"]["units"][:]
        labels = f["labels"][:].astype(np.int64)

    index = np.arange(len(labels))
    num_classes = int(labels.max()) + 1
    if args.classes:
        wanted = [int(c) for c in args.classes.split(",")]
        remap = {c: i for i, c in enumerate(wanted)}
        index = index[np.isin(labels, wanted)]
        num_classes = len(wanted)
    else:
        remap = None
    if args.limit and args.limit < len(index):
        rng = np.random.default_rng(args.seed)
        index = np.sort(rng.choice(index, size=args.limit, replace=False))
    if len(index) == 0:
        sys.exit("no examples selected")

    with open(args.out, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<HBBIIII", VERSION, SHD_TAG, 0, args.steps, CHANNELS, len(index), num_classes))
        for i in index:
            label = remap[int(labels[i])] if remap else int(labels[i])
            grid = bin_example(times[i], units[i], args.steps, args.max_time)
            out.write(struct.pack("<I", label))
            out.write(np.packbits(grid.reshape(-1), bitorder="little").tobytes())
    print(f"wrote {len(index)} examples, {num_classes} classes, T={args.steps} to {args.out}")


if __name__ == "__main__":
    main()
