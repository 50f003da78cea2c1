"""
phasekit - batch entry point

    python main.py synth --num 4 --out data
    python main.py train-ae --manifest data/manifest.json --out ae
    python main.py sample --checkpoint ae/autoencoder.ckpt --diffusion-checkpoint diff/denoiser.ckpt --num 10

Errors print "<CODE>: <message>" to stderr and exit 1.
"""
import sys

from dotenv import load_dotenv

load_dotenv()

from app.cli.router import main  # noqa: E402


if __name__ == "__main__":
    sys.exit(main())
