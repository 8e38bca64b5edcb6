"""Does measured stiffness change surgical guidance? Elastogram vs atlas runs.

The guidance question: if a simulation assumes the population-atlas stiffness
(2.1 kPa everywhere) but the patient's tissue is stiffer near the tool, how
far apart do the two predicted deformations land? A difference above 5 mm at
the tool is treated as clinically significant.

This demo sweeps a stiff spherical inclusion near the retractor site at 1x,
2x, and 4x the atlas stiffness and compares each run against its atlas twin
(same geometry and nodes, constant stiffness).

Run from the repository root:  python3 demos/elastogram_vs_atlas.py
"""

from elastosim import RetractionConfig, compare_case, stiff_inclusion_case


def main():
    config = RetractionConfig()
    print("inclusion contrast -> displacement difference, measured vs atlas")
    print(f"{'contrast':>9s} {'mean over volume':>17s} {'at the tool':>12s} "
          f"{'significant':>12s}")
    for contrast in (1.0, 2.0, 4.0):
        case = stiff_inclusion_case(contrast)
        report = compare_case(case, config)
        print(f"{contrast:8.0f}x {report.mean_volume_diff:15.3f} mm "
              f"{report.at_tool_diff:10.3f} mm {str(report.significant):>12s}")

    print("\nThe difference concentrates at the tool (max over the grabbed"
          "\nnodes exceeds the volume mean), grows with contrast, and crosses"
          "\nthe 5 mm significance flag at 4x. With no inclusion the measured"
          "\nrun IS the atlas run, so the difference is zero.")


if __name__ == "__main__":
    main()
