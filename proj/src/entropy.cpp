// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "tzk/errors.hpp"
#include "tzk/objective.hpp"

namespace tzk {

namespace {

double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

double entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) {
        h -= plogp(v);
    }
    return h;
}

// I(a; b) from a joint table [na x nb].
double mutual_information(const std::vector<double>& joint, std::size_t na, std::size_t nb) {
    std::vector<double> pa(na, 0.0), pb(nb, 0.0);
    for (std::size_t a = 0; a < na; ++a) {
        for (std::size_t b = 0; b < nb; ++b) {
            pa[a] += joint[a * nb + b];
            pb[b] += joint[a * nb + b];
        }
    }
    double mi = 0.0;
    for (std::size_t a = 0; a < na; ++a) {
        for (std::size_t b = 0; b < nb; ++b) {
            const double p = joint[a * nb + b];
            if (p > 0.0) {
                mi += p * (std::log(p) - std::log(pa[a]) - std::log(pb[b]));
            }
        }
    }
    return mi;
}

std::size_t ipow(std::size_t b, std::size_t e) {
    std::size_t r = 1;
    while (e-- > 0) {
        r *= b;
    }
    return r;
}

// Digit i (most significant first) of the k-tuple index.
std::size_t k_digit(std::size_t kidx, std::size_t i, std::size_t heads, std::size_t k_cells) {
    return (kidx / ipow(k_cells, heads - 1 - i)) % k_cells;
}

}  // namespace

DiscreteToy DiscreteToy::from_conditionals(const std::vector<double>& p_t,
                                           const std::vector<std::vector<double>>& cond,
                                           std::size_t k_cells, std::vector<std::size_t> z_of_t) {
    DiscreteToy toy;
    toy.t_cells = p_t.size();
    toy.k_cells = k_cells;
    toy.heads = cond.size();
    toy.z_of_t = std::move(z_of_t);
    const std::size_t nk = ipow(k_cells, toy.heads);
    toy.joint.assign(toy.t_cells * nk, 0.0);
    for (std::size_t t = 0; t < toy.t_cells; ++t) {
        for (std::size_t k = 0; k < nk; ++k) {
            double p = p_t[t];
            for (std::size_t i = 0; i < toy.heads; ++i) {
                p *= cond[i][t * k_cells + k_digit(k, i, toy.heads, k_cells)];
            }
            toy.joint[t * nk + k] = p;
        }
    }
    return toy;
}

EntropyCheck entropy_mi_identity_check(const DiscreteToy& toy) {
    if (toy.t_cells == 0 || toy.t_cells > 64) {
        throw ContractError("toy needs 1..64 t cells");
    }
    if (toy.heads > 2 || toy.k_cells == 0 || toy.k_cells > 32 || toy.k_cells % 2 != 0) {
        throw ContractError("toy needs at most 2 heads and an even k cell count up to 32");
    }
    const std::size_t T = toy.t_cells;
    const std::size_t Kc = toy.k_cells;
    const std::size_t nk = ipow(Kc, toy.heads);
    if (toy.joint.size() != T * nk || toy.z_of_t.size() != T) {
        throw ContractError("toy table sizes disagree with its declared cells");
    }
    {
        std::vector<bool> seen(T, false);
        for (std::size_t z : toy.z_of_t) {
            if (z >= T || seen[z]) {
                throw ContractError("z_of_t is not a bijection");
            }
            seen[z] = true;
        }
    }
    double total = 0.0;
    for (double p : toy.joint) {
        if (!(p >= 0.0)) {
            throw ContractError("toy probabilities must be non-negative");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) {
        throw ContractError("toy probabilities must sum to 1");
    }

    std::vector<double> p_t(T, 0.0);
    std::vector<std::vector<double>> p_tk(toy.heads, std::vector<double>(T * Kc, 0.0));
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < nk; ++k) {
            const double p = toy.joint[t * nk + k];
            p_t[t] += p;
            for (std::size_t i = 0; i < toy.heads; ++i) {
                p_tk[i][t * Kc + k_digit(k, i, toy.heads, Kc)] += p;
            }
        }
    }

    // Both factorizations must reproduce P cell by cell.
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < nk; ++k) {
            const double p = toy.joint[t * nk + k];
            double enc = p_t[t];
            double dec = 1.0;
            for (std::size_t i = 0; i < toy.heads; ++i) {
                const double ptk = p_tk[i][t * Kc + k_digit(k, i, toy.heads, Kc)];
                enc *= p_t[t] > 0.0 ? ptk / p_t[t] : 0.0;
                dec *= ptk;
            }
            if (toy.heads == 0) {
                dec = p_t[t];
            } else if (toy.heads > 1) {
                dec = p_t[t] > 0.0 ? dec / std::pow(p_t[t], static_cast<double>(toy.heads - 1))
                                   : 0.0;
            }
            if (std::abs(enc - p) > 1e-12 || std::abs(dec - p) > 1e-12) {
                throw ContractError("toy is not consistent: p_enc or p_dec differs from P at t=" +
                                    std::to_string(t) + ", k=" + std::to_string(k));
            }
        }
    }

    EntropyCheck out;
    out.lhs = -entropy(toy.joint);
    double rhs = -entropy(p_t);
    for (std::size_t i = 0; i < toy.heads; ++i) {
        std::vector<double> p_k(Kc, 0.0);
        std::vector<double> p_zk(T * Kc, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t k = 0; k < Kc; ++k) {
                p_k[k] += p_tk[i][t * Kc + k];
                p_zk[toy.z_of_t[t] * Kc + k] += p_tk[i][t * Kc + k];
            }
        }
        rhs -= entropy(p_k);
        rhs += 0.5 * (mutual_information(p_tk[i], T, Kc) + mutual_information(p_zk, T, Kc));
    }
    out.rhs = rhs;
    out.deviation = std::abs(out.lhs - out.rhs);
    return out;
}

}  // namespace tzk
