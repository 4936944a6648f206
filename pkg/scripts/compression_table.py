"""Latent size l*d against N*N_c for every shipped preset."""

from calmpde.experiments import compression_table

if __name__ == "__main__":
    print(f"{'config':<24}{'l':>5}{'d':>5}{'l*d':>8}{'N*N_c':>8}{'ratio':>8}")
    for r in compression_table():
        print(f"{r['config']:<24}{r['latent_tokens']:>5}{r['latent_dim']:>5}{r['latent_size']:>8}"
              f"{r['input_size']:>8}{r['ratio']:>8.2f}")
