#include "propih/losses.hpp"

#include "json.hpp"

namespace propih {

LossReport total_loss(const std::array<double, 4>& style,
                      const std::array<double, 4>& content,
                      const std::array<double, 3>& bce,
                      const std::array<bool, 3>& bce_present,
                      bool last_stage_loss_only) {
  LossReport r;
  r.style = style;
  r.content = content;
  r.bce = bce;
  r.bce_present = bce_present;
  for (int k = 0; k < 4; ++k) {
    if (last_stage_loss_only && k < 3) {
      r.style[static_cast<std::size_t>(k)] = 0.0;
      r.content[static_cast<std::size_t>(k)] = 0.0;
    }
    r.total[static_cast<std::size_t>(k)] =
        r.style[static_cast<std::size_t>(k)] + r.content[static_cast<std::size_t>(k)];
  }
  double all = 0.0;
  for (double t : r.total) all += t;
  for (int k = 0; k < 3; ++k)
    if (r.bce_present[static_cast<std::size_t>(k)]) all += r.bce[static_cast<std::size_t>(k)];
  r.all = all;
  return r;
}

std::string LossReport::to_json_line(std::int64_t step) const {
  nlohmann::ordered_json j;
  j["step"] = step;
  for (int k = 0; k < 4; ++k) j["sty" + std::to_string(k + 1)] = style[static_cast<std::size_t>(k)];
  for (int k = 0; k < 4; ++k) j["con" + std::to_string(k + 1)] = content[static_cast<std::size_t>(k)];
  for (int k = 0; k < 4; ++k) j["tot" + std::to_string(k + 1)] = total[static_cast<std::size_t>(k)];
  for (int k = 0; k < 3; ++k) j["bce" + std::to_string(k + 1)] = bce[static_cast<std::size_t>(k)];
  j["all"] = all;
  return j.dump();
}

}  // namespace propih
