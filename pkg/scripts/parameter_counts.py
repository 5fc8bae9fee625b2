"""Print trainable-parameter counts and layer shapes for every filter configuration.

    python scripts/parameter_counts.py [--pre-activation]
"""
import argparse

from ascfusion.nn.network import FILTER_CONFIGURATIONS, INPUT_SHAPE, NetworkConfig, build_network, parameter_count


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pre-activation", action="store_true")
    args = ap.parse_args()
    print(f"{'configuration':<14} {'groups (count x time x freq)':<40} {'parameters':>10}")
    for name in FILTER_CONFIGURATIONS:
        cfg = NetworkConfig(name, pre_activation=args.pre_activation)
        groups = ", ".join(f"{n}x{t}x{f}" for n, t, f in cfg.filter_groups())
        print(f"{name:<14} {groups:<40} {parameter_count(cfg):>10,}")
    print()
    net = build_network(NetworkConfig("CNN_4", pre_activation=args.pre_activation))
    shape = INPUT_SHAPE
    print("CNN_4 shape chain:")
    for layer in net.layers:
        shape = layer.output_shape(shape)
        print(f"  {layer.name:<12} -> {shape}")


if __name__ == "__main__":
    main()
