#!/usr/bin/env python3
"""latent-lesion-lab entry point: `python3 latent_lesion_lab.py <subcommand> ...` (see cli.py)."""

from __future__ import annotations

if __name__ == "__main__":
    from cli import main

    raise SystemExit(main())
