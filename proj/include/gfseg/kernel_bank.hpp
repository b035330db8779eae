#pragma once

// Class kernel bank: one learned C-vector per class, base rows first
// (background is base class 0), novel rows appended by registration.
// Each row remembers the session that produced it.

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "gfseg/manifest.hpp"
#include "gfseg/tensor.hpp"
#include "gfseg/tensor_io.hpp"

namespace gfseg {

template <typename Scalar>
struct KernelBank {
    Tensor<Scalar> kernels;       // N x C, row i = kernel of class_ids[i]
    std::vector<int> class_ids;   // size N, unique
    Index base_count = 0;         // first base_count rows are base classes
    std::vector<int> session_of;  // size N, session id per row (0 = base)

    Index rows() const { return kernels.rank() == 2 ? kernels.dim(0) : 0; }
    Index channels() const { return kernels.rank() == 2 ? kernels.dim(1) : 0; }
};

template <typename Scalar>
void validate_bank(const KernelBank<Scalar>& bank) {
    if (bank.kernels.rank() != 2) throw ShapeError("kernel bank must be N x C");
    const Index n = bank.rows();
    if (n < 1) throw ShapeError("kernel bank needs at least one row");
    if (bank.base_count < 0 || bank.base_count > n) throw ShapeError("base_count outside [0, N]");
    if (static_cast<Index>(bank.class_ids.size()) != n) throw ShapeError("class_ids size != kernel rows");
    if (static_cast<Index>(bank.session_of.size()) != n) throw ShapeError("session_of size != kernel rows");
    std::set<int> seen(bank.class_ids.begin(), bank.class_ids.end());
    if (static_cast<Index>(seen.size()) != n) throw DataError("duplicate class id in kernel bank");
}

// Copy of the first base_count rows.
template <typename Scalar>
Tensor<Scalar> base_rows(const KernelBank<Scalar>& bank) {
    const Index nb = bank.base_count, c = bank.channels();
    Tensor<Scalar> out({nb, c});
    std::copy(bank.kernels.data(), bank.kernels.data() + nb * c, out.data());
    return out;
}

// New bank with the base rows replaced; novel rows are copied bit-exactly.
template <typename Scalar>
KernelBank<Scalar> with_base_rows(const KernelBank<Scalar>& bank, const Tensor<Scalar>& rows) {
    if (rows.rank() != 2 || rows.dim(0) != bank.base_count || rows.dim(1) != bank.channels())
        throw ShapeError("replacement base rows must be base_count x C");
    KernelBank<Scalar> out = bank;
    std::copy(rows.data(), rows.data() + rows.size(), out.kernels.data());
    return out;
}

template <typename Scalar>
void save_bank(const std::filesystem::path& dir, const KernelBank<Scalar>& bank,
               const std::string& kernels_file = "kernels.gfst") {
    std::filesystem::create_directories(dir);
    write_gfst(dir / kernels_file, bank.kernels);
    Manifest m;
    m.set("format", "gfseg-bank/1");
    m.set("kernels", kernels_file);
    m.set("base_count", static_cast<std::int64_t>(bank.base_count));
    m.set_int_list("class_ids", bank.class_ids.begin(), bank.class_ids.end());
    m.set_int_list("session_of", bank.session_of.begin(), bank.session_of.end());
    m.save(dir / "bank.manifest");
}

template <typename Scalar>
KernelBank<Scalar> load_bank(const std::filesystem::path& dir) {
    const Manifest m = Manifest::load(dir / "bank.manifest");
    KernelBank<Scalar> bank;
    bank.kernels = read_gfst<Scalar>(dir / m.get("kernels"));
    bank.base_count = m.get_int("base_count");
    for (const auto v : m.get_int_list("class_ids")) bank.class_ids.push_back(static_cast<int>(v));
    for (const auto v : m.get_int_list("session_of")) bank.session_of.push_back(static_cast<int>(v));
    validate_bank(bank);
    return bank;
}

} // namespace gfseg
