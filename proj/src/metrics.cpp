#include <cstdio>
#include <ostream>

#include "dra/benchmark.hpp"

namespace dra {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_metrics_header(std::ostream& os) {
  os << "seed,config,epoch,split,base_acc,new_acc,hm,loss_ce,loss_reg_T,loss_reg_V\n";
}

void write_metrics_row(std::ostream& os, const MetricsRecord& r) {
  os << r.seed << ',' << r.config << ',' << r.epoch << ',' << r.split << ',' << format_double(r.base_acc) << ','
     << format_double(r.new_acc) << ',' << format_double(r.hm) << ',' << format_double(r.loss_ce) << ','
     << format_double(r.loss_reg_text) << ',' << format_double(r.loss_reg_image) << '\n';
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationCell>& cells, const std::string& fingerprint) {
  os << "variant,groups,ratios,seeds,base_mean,base_std,new_mean,new_std,hm_mean,hm_std,fingerprint\n";
  for (const auto& c : cells) {
    std::string ratios;
    for (std::size_t i = 0; i < c.sweep.ratios.size(); ++i) {
      if (i) ratios += ';';
      ratios += format_double(c.sweep.ratios[i]);
    }
    os << c.variant << ',' << c.sweep.groups << ',' << ratios << ',' << c.finals.size() << ','
       << format_double(c.base_mean) << ',' << format_double(c.base_std) << ',' << format_double(c.new_mean) << ','
       << format_double(c.new_std) << ',' << format_double(c.hm_mean) << ',' << format_double(c.hm_std) << ','
       << fingerprint << '\n';
  }
}

}  // namespace dra
