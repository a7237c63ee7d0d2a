#include "ikd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ikd/errors.hpp"
#include "ikd/random.hpp"

namespace ikd {

namespace {

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

struct Coord {
    std::size_t param;
    std::size_t index;
};

GradCheckReport run_check(const std::function<Tensor()>& loss, std::vector<Tensor>& params,
                          const GradCheckOptions& opt) {
    for (auto& p : params) p.zero_grad();
    Tensor l0 = loss();
    if (l0.numel() != 1) throw ContractError("grad_check: function is not scalar-valued");
    const double base = l0.item();
    if (!bit_equal(base, loss().item())) throw ContractError("grad_check: function is not deterministic");
    l0.backward();

    std::vector<Coord> coords;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p].numel(); ++i) coords.push_back({p, i});
    if (opt.max_coords > 0 && opt.max_coords < coords.size()) {
        Rng rng(opt.seed);
        rng.shuffle(coords);
        coords.resize(opt.max_coords);
    }

    GradCheckReport report;
    for (const auto& c : coords) {
        Tensor& p = params[c.param];
        const double analytic = p.has_grad() ? p.grad()[c.index] : 0.0;
        auto data = p.mutable_data();
        const double orig = data[c.index];
        data[c.index] = orig + opt.eps;
        double fp;
        {
            NoGradGuard ng;
            fp = loss().item();
        }
        data[c.index] = orig - opt.eps;
        double fm;
        {
            NoGradGuard ng;
            fm = loss().item();
        }
        data[c.index] = orig;
        const double numeric = (fp - fm) / (2.0 * opt.eps);
        const double denom = std::max({std::fabs(analytic), std::fabs(numeric), opt.floor});
        const double rel = std::fabs(analytic - numeric) / denom;
        if (rel > report.max_rel_error || report.coords_checked == 0) {
            report.max_rel_error = rel;
            report.worst_coord = c.index;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
        ++report.coords_checked;
    }
    for (auto& p : params) p.zero_grad();
    report.passed = report.max_rel_error < opt.tol;
    return report;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           const GradCheckOptions& options) {
    Tensor leaf = Tensor::from(x.shape(), x.to_vector(), true);
    std::vector<Tensor> params{leaf};
    return run_check([&] { return f(leaf); }, params, options);
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  const GradCheckOptions& options) {
    return run_check(loss, params, options);
}

}  // namespace ikd
