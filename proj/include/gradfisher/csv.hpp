#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "gradfisher/errors.hpp"

namespace gradfisher {

// Minimal CSV writer: header row, '.' decimals, 17 significant digits, LF
// line endings. Output is byte-stable for identical inputs.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header)
        : os_(path, std::ios::binary) {
        if (!os_) throw ParseError("csv: cannot open " + path + " for writing");
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) os_ << ',';
            os_ << header[i];
        }
        os_ << '\n';
        columns_ = header.size();
    }

    CsvWriter& field(const std::string& v) {
        sep();
        os_ << v;
        return *this;
    }

    CsvWriter& field(std::size_t v) {
        sep();
        os_ << v;
        return *this;
    }

    CsvWriter& field(double v) {
        sep();
        if (std::isnan(v)) {
            // empty cell for missing values
        } else if (std::isinf(v)) {
            os_ << (v > 0 ? "inf" : "-inf");
        } else {
            char buf[40];
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            os_ << buf;
        }
        return *this;
    }

    void end_row() {
        if (in_row_ != columns_)
            throw ContractError("csv: row has " + std::to_string(in_row_) +
                                " fields, header has " + std::to_string(columns_));
        os_ << '\n';
        in_row_ = 0;
    }

private:
    void sep() {
        if (in_row_) os_ << ',';
        ++in_row_;
    }

    std::ofstream os_;
    std::size_t columns_ = 0;
    std::size_t in_row_ = 0;
};

inline std::string format_double(double v) {
    if (std::isnan(v)) return "";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace gradfisher
