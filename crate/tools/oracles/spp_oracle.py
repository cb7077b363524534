"""Extended-precision reference values for the physics tests.

Drude parameters: Ordal et al., Appl. Opt. 24, 4493 (1985), molybdenum:
plasma frequency 6.02e4 cm^-1, damping 4.12e2 cm^-1, eps_inf = 1.

Thin-film roots are located with mpmath.findroot at 50 digits, seeded from
the single-interface solution, and then polished; they do not share code
with the Rust Newton solver.
"""
import mpmath as mp

mp.mp.dps = 50
C = mp.mpf("299792458")
WP = 2 * mp.pi * C * mp.mpf("6.02e6")
GAMMA = 2 * mp.pi * C * mp.mpf("4.12e4")


def drude(lam, eps_inf=1, wp=WP, gamma=GAMMA):
    w = 2 * mp.pi * C / lam
    return eps_inf - wp**2 / (w**2 + 1j * gamma * w)


def interface_index(eps_d, eps_m):
    b = mp.sqrt(eps_d * eps_m / (eps_d + eps_m))
    if b.real < 0:
        b = -b
    return b


def film_residual(b, eps_d, eps_m, t_over_lam, parity):
    km = mp.sqrt(b * b - eps_m)
    kd = mp.sqrt(b * b - eps_d)
    phi = mp.pi * t_over_lam
    th = mp.tanh(phi * km)
    if parity == "antisymmetric":
        return km * eps_d * th + kd * eps_m
    return kd * eps_m * th + km * eps_d


def film_index(eps_d, eps_m, t, lam, parity="antisymmetric"):
    seed = interface_index(eps_d, eps_m)
    return mp.findroot(lambda b: film_residual(b, eps_d, eps_m, t / lam, parity), seed)


if __name__ == "__main__":
    print("omega_p =", mp.nstr(WP, 20), "gamma =", mp.nstr(GAMMA, 20))
    lam = mp.mpf("500e-9")
    eps = drude(lam)
    print("eps(500nm) =", mp.nstr(eps.real, 20), mp.nstr(eps.imag, 20))
    b = interface_index(1, mp.mpc(-2, "0.1"))
    print("interface index eps_m=-2+0.1i:", mp.nstr(b.real, 20), mp.nstr(b.imag, 20))
    k0 = 2 * mp.pi / mp.mpf("600e-9")
    print("  beta @600nm:", mp.nstr(k0 * b.real, 20), mp.nstr(k0 * b.imag, 20))
    for t_nm, parity in [(36, "antisymmetric"), (36, "symmetric"), (48, "antisymmetric")]:
        t = mp.mpf(t_nm) * mp.mpf("1e-9")
        bf = film_index(1, eps, t, lam, parity)
        k0 = 2 * mp.pi / lam
        beta = k0 * bf
        print(f"t={t_nm} {parity}: index =", mp.nstr(bf.real, 20), mp.nstr(bf.imag, 20))
        print("   lambda_spp_nm =", mp.nstr(2 * mp.pi / beta.real * 1e9, 20),
              " L_spp_nm =", mp.nstr(1 / beta.imag * 1e9, 20))
    bi = interface_index(1, eps)
    print("interface @500:", mp.nstr(bi.real, 20), mp.nstr(bi.imag, 20))
