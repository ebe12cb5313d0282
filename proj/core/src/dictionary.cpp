#include "ddae/dictionary.hpp"

#include <cmath>
#include <sstream>

#include "ddae/error.hpp"

namespace ddae::dictionary {

const char* to_string(ConceptRole role) {
    switch (role) {
        case ConceptRole::causal: return "causal";
        case ConceptRole::spurious: return "spurious";
        case ConceptRole::unknown: return "unknown";
    }
    return "unknown";
}

ConceptRole parse_role(std::string_view text) {
    if (text == "causal") return ConceptRole::causal;
    if (text == "spurious") return ConceptRole::spurious;
    if (text == "unknown") return ConceptRole::unknown;
    fail(ErrorCode::invalid_input, "unknown concept role '" + std::string(text) + "'");
}

Vector Dictionary::direction(std::size_t k) const {
    require(k < dim(), "Dictionary::direction: component " + std::to_string(k) + " out of range");
    return omega.col(k);
}

std::optional<std::size_t> Dictionary::find(std::string_view name) const {
    for (std::size_t k = 0; k < annotations.size(); ++k)
        if (annotations[k] && annotations[k]->name == name) return k;
    return std::nullopt;
}

std::size_t Dictionary::index_of(std::string_view name) const {
    if (auto k = find(name)) return *k;
    fail(ErrorCode::invalid_input, "dictionary has no component named '" + std::string(name) + "'");
}

double pearson(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size() && !a.empty(), "pearson: length mismatch");
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

Matrix standardize_columns(const Matrix& s) {
    require(s.rows() > 1, "standardize_columns: need at least two rows");
    const Vector mean = column_means(s);
    Matrix out = center_rows(s, mean);
    for (std::size_t c = 0; c < s.cols(); ++c) {
        double var = 0.0;
        for (std::size_t r = 0; r < s.rows(); ++r) var += out(r, c) * out(r, c);
        var /= static_cast<double>(s.rows());
        if (var <= 0.0) fail(ErrorCode::degenerate_concepts, "concept column " + std::to_string(c) + " is constant");
        const double inv = 1.0 / std::sqrt(var);
        for (std::size_t r = 0; r < s.rows(); ++r) out(r, c) *= inv;
    }
    return out;
}

namespace {

void check_embeddings(const Matrix& z, const char* op) {
    if (z.rows() <= z.cols())
        fail(ErrorCode::invalid_input, std::string(op) + ": need more samples than embedding dimensions");
    if (!z.all_finite()) fail(ErrorCode::invalid_input, std::string(op) + ": non-finite embeddings");
}

void check_standardized(const Matrix& s) {
    const Vector mean = column_means(s);
    for (std::size_t c = 0; c < s.cols(); ++c) {
        double var = 0.0;
        for (std::size_t r = 0; r < s.rows(); ++r) var += (s(r, c) - mean[c]) * (s(r, c) - mean[c]);
        var /= static_cast<double>(s.rows());
        if (std::abs(mean[c]) > 1e-6 || std::abs(var - 1.0) > 1e-6)
            fail(ErrorCode::invalid_input, "fit_procrustes: concept column " + std::to_string(c) +
                                               " is not standardized (use standardize_columns)");
    }
}

}  // namespace

Dictionary fit_procrustes(const Matrix& z, const Matrix& s, const std::vector<std::string>& concept_names,
                          ProcrustesReport* report) {
    check_embeddings(z, "fit_procrustes");
    const std::size_t dim = z.cols(), k = s.cols();
    require(s.rows() == z.rows(), "fit_procrustes: z and s row counts differ");
    require(k >= 1 && k <= dim, "fit_procrustes: need 1 <= K <= D concepts");
    require(concept_names.empty() || concept_names.size() == k, "fit_procrustes: one name per concept");
    if (!s.all_finite()) fail(ErrorCode::invalid_input, "fit_procrustes: non-finite concepts");
    check_standardized(s);

    Dictionary d;
    d.method = FitMethod::procrustes;
    d.centering_mean = column_means(z);
    const Matrix zc = center_rows(z, d.centering_mean);

    // M = S^T Z_c (K x D) = U S V^T, omega_1 = V U^T (D x K)
    const Matrix m = matmul_tn(s, zc);
    const SvdResult f = svd(m);
    const double smax = f.sigma.empty() ? 0.0 : f.sigma.front();
    std::vector<std::size_t> weak;
    for (std::size_t i = 0; i < f.sigma.size(); ++i)
        if (!(f.sigma[i] > smax * 1e-10) || smax == 0.0) weak.push_back(i);
    if (!weak.empty()) {
        std::ostringstream msg;
        msg << "cross-covariance has rank " << k - weak.size() << " < " << k << "; collinear concepts:";
        for (std::size_t c = 0; c < k; ++c) {
            bool involved = false;
            for (std::size_t w : weak) involved |= std::abs(f.u(c, w)) > 1e-3;
            if (involved) msg << ' ' << (concept_names.empty() ? "concept_" + std::to_string(c) : concept_names[c]);
        }
        fail(ErrorCode::degenerate_concepts, msg.str());
    }
    const Matrix omega1 = matmul(transpose(f.vt), transpose(f.u));
    const Matrix pad = orthonormal_complement(omega1, dim - k);
    d.omega = hstack(omega1, pad);
    d.k_semantic = k;
    d.annotations.assign(dim, std::nullopt);
    for (std::size_t c = 0; c < k; ++c)
        d.annotations[c] =
            ComponentAnnotation{concept_names.empty() ? "concept_" + std::to_string(c) : concept_names[c],
                                ConceptRole::unknown};

    if (report) {
        report->singular_values = f.sigma;
        const Matrix aligned = matmul(zc, omega1);
        report->alignment_correlation.resize(k);
        for (std::size_t c = 0; c < k; ++c) report->alignment_correlation[c] = pearson(aligned.col(c), s.col(c));
    }
    return d;
}

Dictionary fit_svd(const Matrix& z, SvdReport* report) {
    check_embeddings(z, "fit_svd");
    Dictionary d;
    d.method = FitMethod::svd;
    d.centering_mean = column_means(z);
    const SvdResult f = svd(center_rows(z, d.centering_mean));
    d.omega = transpose(f.vt);
    d.k_semantic = 0;
    d.annotations.assign(d.omega.cols(), std::nullopt);
    if (report) {
        report->singular_values = f.sigma;
        double total = 0.0;
        for (double s : f.sigma) total += s * s;
        report->explained_variance.resize(f.sigma.size());
        for (std::size_t i = 0; i < f.sigma.size(); ++i)
            report->explained_variance[i] = total > 0.0 ? f.sigma[i] * f.sigma[i] / total : 0.0;
    }
    return d;
}

Vector forward_map(const Dictionary& d, std::span<const double> z) {
    require(z.size() == d.dim(), "forward_map: embedding dimension mismatch");
    Vector zc(z.begin(), z.end());
    for (std::size_t i = 0; i < zc.size(); ++i) zc[i] -= d.centering_mean[i];
    return matvec_t(d.omega, zc);
}

Vector inverse_map(const Dictionary& d, std::span<const double> c) {
    require(c.size() == d.dim(), "inverse_map: coefficient dimension mismatch");
    Vector z = matvec(d.omega, c);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += d.centering_mean[i];
    return z;
}

Matrix forward_map(const Dictionary& d, const Matrix& z) {
    require(z.cols() == d.dim(), "forward_map: embedding dimension mismatch");
    return matmul(center_rows(z, d.centering_mean), d.omega);
}

Matrix inverse_map(const Dictionary& d, const Matrix& c) {
    require(c.cols() == d.dim(), "inverse_map: coefficient dimension mismatch");
    Matrix z = matmul_nt(c, d.omega);
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] += d.centering_mean[i];
    }
    return z;
}

Dictionary annotate_components(Dictionary d, const std::vector<AnnotationSpec>& specs) {
    for (const auto& s : specs) {
        if (s.index >= d.dim())
            fail(ErrorCode::invalid_input, "annotate_components: component " + std::to_string(s.index) +
                                               " out of range for dimension " + std::to_string(d.dim()));
        require(!s.name.empty(), "annotate_components: empty concept name");
        require(s.name.find_first_of("\t\n") == std::string::npos, "annotate_components: name contains tab/newline");
        d.annotations[s.index] = ComponentAnnotation{s.name, s.role};
    }
    return d;
}

std::vector<AnnotationSpec> annotations_from_metadata(const Dictionary& d, const Matrix& z, const Matrix& s,
                                                      const std::vector<std::string>& names,
                                                      const std::vector<ConceptRole>& roles) {
    require(names.size() == s.cols() && roles.size() == s.cols(), "annotations_from_metadata: one name/role per concept");
    require(z.rows() == s.rows(), "annotations_from_metadata: row mismatch");
    const Matrix coeff = forward_map(d, z);
    std::vector<AnnotationSpec> out;
    std::vector<bool> taken(d.dim(), false);
    for (std::size_t c = 0; c < s.cols(); ++c) {
        const Vector sc = s.col(c);
        std::size_t best = d.dim();
        double best_corr = -1.0;
        for (std::size_t k = 0; k < d.dim(); ++k) {
            if (taken[k]) continue;
            const double r = std::abs(pearson(coeff.col(k), sc));
            if (r > best_corr) {
                best_corr = r;
                best = k;
            }
        }
        taken[best] = true;
        out.push_back({best, names[c], roles[c]});
    }
    return out;
}

// ---- persistence ---------------------------------------------------------------

Container dictionary_to_container(const Dictionary& d, const KeyValues& extra) {
    KeyValues header = extra;
    header["artifact"] = "dictionary";
    header["method"] = d.method == FitMethod::procrustes ? "procrustes" : "svd";
    header["k_semantic"] = std::to_string(d.k_semantic);
    header["dim"] = std::to_string(d.dim());
    std::string table;
    for (std::size_t k = 0; k < d.annotations.size(); ++k)
        if (d.annotations[k])
            table += std::to_string(k) + "\t" + d.annotations[k]->name + "\t" + to_string(d.annotations[k]->role) + "\n";
    Container c;
    c.add_text(BlockKind::header, format_key_values(header));
    c.add_matrix(BlockKind::omega, d.omega);
    c.add_matrix(BlockKind::centering_mean, Matrix(1, d.centering_mean.size(), d.centering_mean));
    c.add_text(BlockKind::annotations, table);
    return c;
}

Dictionary dictionary_from_container(const Container& c, KeyValues* header_out) {
    const KeyValues header = parse_key_values(c.get(BlockKind::header, "header").text);
    if (require_key(header, "artifact") != "dictionary") fail(ErrorCode::format, "not a dictionary");
    Dictionary d;
    const std::string& method = require_key(header, "method");
    if (method != "procrustes" && method != "svd") fail(ErrorCode::format, "unknown dictionary method '" + method + "'");
    d.method = method == "procrustes" ? FitMethod::procrustes : FitMethod::svd;
    d.k_semantic = std::stoull(require_key(header, "k_semantic"));
    d.omega = c.get(BlockKind::omega, "omega").values;
    const Matrix& mean = c.get(BlockKind::centering_mean, "centering mean").values;
    if (d.omega.rows() != d.omega.cols() || mean.rows() != 1 || mean.cols() != d.omega.cols() ||
        d.k_semantic > d.omega.cols())
        fail(ErrorCode::format, "dictionary blocks have inconsistent shapes");
    // float32 storage loses orthogonality at the 1e-7 level; restore it
    reorthonormalize_columns(d.omega);
    d.centering_mean.assign(mean.data().begin(), mean.data().end());
    d.annotations.assign(d.dim(), std::nullopt);

    std::istringstream table(c.get(BlockKind::annotations, "annotations").text);
    std::string line;
    while (std::getline(table, line)) {
        if (line.empty()) continue;
        const auto t1 = line.find('\t');
        const auto t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) fail(ErrorCode::format, "malformed annotation row");
        const std::size_t idx = std::stoull(line.substr(0, t1));
        if (idx >= d.dim()) fail(ErrorCode::format, "annotation index out of range");
        d.annotations[idx] = ComponentAnnotation{line.substr(t1 + 1, t2 - t1 - 1), parse_role(line.substr(t2 + 1))};
    }
    if (header_out) *header_out = header;
    return d;
}

void save_dictionary(const std::filesystem::path& path, const Dictionary& d, const KeyValues& extra) {
    dictionary_to_container(d, extra).save(path);
}

Dictionary load_dictionary(const std::filesystem::path& path, KeyValues* header) {
    return dictionary_from_container(Container::load(path), header);
}

}  // namespace ddae::dictionary
